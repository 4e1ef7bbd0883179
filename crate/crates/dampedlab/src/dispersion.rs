//! Hyperbolic dispersion: symbolic-path decomposition of `V^n`, polygon cylinder
//! sums, and the polar split of the symmetrized propagator.

use std::collections::HashMap;
use std::f64::consts::PI;

use faer::{c64, Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::classical::{self, Observable, TorusMap, TorusPoint};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::qtorus::{self, DampedPropagator, HilbertGrid};
use crate::thermo::{self, PressureModel, Potential};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrenfestTime {
    pub n: usize,
    pub eps: f64,
    pub lambda_max: f64,
    pub t: usize,
}

impl EhrenfestTime {
    /// Largest even integer `≤ (1 − 2ε)·log(2πN)/λ_max`.
    pub fn new(n: usize, eps: f64, lambda_max: f64) -> Self {
        let raw = (1.0 - 2.0 * eps) * (2.0 * PI * n as f64).ln() / lambda_max;
        let t = if raw >= 0.0 { (raw.floor() as usize) & !1 } else { 0 };
        Self { n, eps, lambda_max, t }
    }
}

/// Smooth ramp from 0 at `t ≤ 0` to 1 at `t ≥ 1`.
fn smooth_step(t: f64) -> f64 {
    let f = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        f(t) / (f(t) + f(1.0 - t))
    }
}

/// One-dimensional partition of unity `χ_0..χ_{L−1}` on the circle, with
/// ramps of half-width `w` around each boundary `i/L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bumps {
    pub l: usize,
    pub w: f64,
}

impl Bumps {
    pub fn eval(&self, i: usize, x: f64) -> f64 {
        if self.l == 1 {
            return 1.0;
        }
        let h = 0.5 / self.l as f64;
        let t = classical::wrap_signed(x - (i as f64 + 0.5) / self.l as f64);
        let ramp = |s: f64| smooth_step((s + self.w) / (2.0 * self.w));
        ramp(t + h) * (1.0 - ramp(t - h))
    }

    /// Support `[i/L − w, (i+1)/L + w]`, unwrapped.
    pub fn support(&self, i: usize) -> (f64, f64) {
        if self.l == 1 {
            return (0.0, 1.0);
        }
        let lf = self.l as f64;
        (i as f64 / lf - self.w, (i + 1) as f64 / lf + self.w)
    }
}

/// Anti-Wick quantized partition `Π_j = Op_AW(χ_a(x)χ_b(p))`, `j = a·L + b`.
#[derive(Clone, Debug)]
pub struct QuantumPartition {
    pub j: usize,
    pub delta: f64,
    pub bumps: Bumps,
    grid: HilbertGrid,
    /// rows carrying `Π_{ab}` for each x-cell `a`; the blocks live on `R_a × R_a`
    row_sets: Vec<Vec<usize>>,
    blocks: Vec<CMat>,
}

/// Overlap half-width as a fraction of the cell side.
pub const MARGIN_FRACTION: f64 = 0.125;

fn bump_coefficients(bumps: &Bumps, i: usize, kmax: usize) -> Vec<c64> {
    // samples well beyond kmax keep aliasing below rounding for C^∞ bumps
    let g = (16 * kmax).max(16384).next_power_of_two();
    let mut buf: Vec<c64> = (0..g).map(|s| c64::new(bumps.eval(i, s as f64 / g as f64), 0.0)).collect();
    rustfft::FftPlanner::new().plan_fft_forward(g).process(&mut buf);
    let scale = 1.0 / g as f64;
    // index m ↦ coefficient of e^{2πi(m − kmax)x}
    (0..=2 * kmax)
        .map(|m| {
            let k = m as i64 - kmax as i64;
            buf[k.rem_euclid(g as i64) as usize] * scale
        })
        .collect()
}

pub fn build_partition(grid: &HilbertGrid, j: usize, delta: f64) -> Result<QuantumPartition> {
    let l = (j as f64).sqrt().round() as usize;
    if l == 0 || l * l != j {
        return Err(Error::Partition(format!("J = {j} is not a perfect square")));
    }
    if 1.0 / (l as f64) > delta + 1e-12 && l > 1 {
        return Err(Error::Partition(format!(
            "cells of side 1/{l} exceed the diameter bound delta = {delta}"
        )));
    }
    let n = grid.n();
    let bumps = Bumps {
        l,
        w: MARGIN_FRACTION / l as f64,
    };
    if l == 1 {
        return Ok(QuantumPartition {
            j,
            delta,
            bumps,
            grid: *grid,
            row_sets: vec![(0..n).collect()],
            blocks: vec![linalg::identity(n)],
        });
    }
    // Gaussian anti-Wick factor is below 1e-26 beyond this frequency
    let kmax = ((6.2 * (n as f64).sqrt()).ceil() as usize).max(8);
    let coeffs: Vec<Vec<c64>> = (0..l)
        .map(|i| {
            let mut c = bump_coefficients(&bumps, i, kmax);
            for (m, z) in c.iter_mut().enumerate() {
                let k = m as i64 - kmax as i64;
                *z *= qtorus::anti_wick_gaussian(n, (k, 0));
            }
            c
        })
        .collect();
    // smoothed x-profiles on the half-integer grid y = m/(2N)
    let profiles: Vec<Vec<c64>> = coeffs
        .iter()
        .map(|c| {
            let mut buf = vec![c64::new(0.0, 0.0); 2 * n];
            for (m, z) in c.iter().enumerate() {
                let k = m as i64 - kmax as i64;
                buf[k.rem_euclid(2 * n as i64) as usize] += *z;
            }
            rustfft::FftPlanner::new().plan_fft_inverse(2 * n).process(&mut buf);
            buf
        })
        .collect();
    // Π_{ab}(r, r + k) = c̃_b(k)·f̃_a((2r + k)/2N)
    let entry = |a: usize, b: usize, r: usize, m: usize| -> c64 {
        let k2 = m as i64 - kmax as i64;
        let y = (2 * r as i64 + k2).rem_euclid(2 * n as i64) as usize;
        coeffs[b][m] * profiles[a][y]
    };
    let cmax: Vec<f64> = coeffs.iter().map(|c| c.iter().map(|z| z.norm()).fold(0.0, f64::max)).collect();
    let fmax: Vec<f64> = profiles.iter().map(|f| f.iter().map(|z| z.norm()).fold(0.0, f64::max)).collect();
    use rayon::prelude::*;
    let row_sets: Vec<Vec<usize>> = (0..l)
        .map(|a| {
            (0..n)
                .filter(|&r| {
                    (0..l).any(|b| {
                        let thr = ROW_CUTOFF * cmax[b] * fmax[a];
                        (0..=2 * kmax).any(|m| entry(a, b, r, m).norm() > thr)
                    })
                })
                .collect()
        })
        .collect();
    let blocks: Vec<CMat> = (0..j)
        .into_par_iter()
        .map(|idx| {
            let (a, b) = (idx / l, idx % l);
            let rows = &row_sets[a];
            let mut pos = vec![usize::MAX; n];
            for (i, r) in rows.iter().enumerate() {
                pos[*r] = i;
            }
            let mut block = Mat::<c64>::zeros(rows.len(), rows.len());
            for (i, &r) in rows.iter().enumerate() {
                for m in 0..=2 * kmax {
                    let col = (r as i64 + m as i64 - kmax as i64).rem_euclid(n as i64) as usize;
                    if pos[col] != usize::MAX {
                        block[(i, pos[col])] += entry(a, b, r, m);
                    }
                }
            }
            block
        })
        .collect();
    Ok(QuantumPartition {
        j,
        delta,
        bumps,
        grid: *grid,
        row_sets,
        blocks,
    })
}

/// Entries below this fraction of the cell peak are dropped from the blocks; it
/// sits above the rounding floor of the FFT-smoothed profiles.
const ROW_CUTOFF: f64 = 1e-14;

impl QuantumPartition {
    pub fn l(&self) -> usize {
        self.bumps.l
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn symbol(&self, j: usize, rho: TorusPoint) -> f64 {
        let l = self.l();
        self.bumps.eval(j / l, rho.x) * self.bumps.eval(j % l, rho.p)
    }

    /// Core square `[x0, x1] × [p0, p1]`.
    pub fn core(&self, j: usize) -> [f64; 4] {
        let l = self.l() as f64;
        let (a, b) = ((j / self.l()) as f64, (j % self.l()) as f64);
        [a / l, (a + 1.0) / l, b / l, (b + 1.0) / l]
    }

    /// Support rectangle (unwrapped, may stick out of the unit square).
    pub fn support(&self, j: usize) -> [f64; 4] {
        let (x0, x1) = self.bumps.support(j / self.l());
        let (p0, p1) = self.bumps.support(j % self.l());
        [x0, x1, p0, p1]
    }

    pub fn rows(&self, j: usize) -> &[usize] {
        &self.row_sets[j / self.l()]
    }

    pub fn operator(&self, j: usize) -> CMat {
        let n = self.n();
        let rows = self.rows(j);
        let block = &self.blocks[j];
        let mut m = Mat::<c64>::zeros(n, n);
        for (r, &gr) in rows.iter().enumerate() {
            for (c, &gc) in rows.iter().enumerate() {
                m[(gr, gc)] = block[(r, c)];
            }
        }
        m
    }

    /// `Π_j X`.
    pub fn apply(&self, j: usize, x: MatRef<'_, c64>) -> CMat {
        let rows = self.rows(j);
        let yr = self.apply_restricted(j, x);
        let mut y = Mat::<c64>::zeros(x.nrows(), x.ncols());
        for (r, &gr) in rows.iter().enumerate() {
            for c in 0..x.ncols() {
                y[(gr, c)] = yr[(r, c)];
            }
        }
        y
    }

    /// `Π_j X` restricted to the rows of cell `j`.
    fn apply_restricted(&self, j: usize, x: MatRef<'_, c64>) -> CMat {
        let rows = self.rows(j);
        let xr = Mat::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)]);
        &self.blocks[j] * &xr
    }

    /// `‖Σ_j Π_j − I‖₂`.
    pub fn sum_defect(&self) -> Result<f64> {
        let n = self.n();
        let mut s = Mat::<c64>::zeros(n, n);
        for j in 0..self.j {
            s += &self.operator(j);
        }
        linalg::spectral_diff(s.as_ref(), linalg::identity(n).as_ref())
    }
}

/// `Π_{α_n} V ··· Π_{α_1} V`.
pub fn path_operator(dp: &DampedPropagator, partition: &QuantumPartition, alpha: &[usize]) -> CMat {
    let mut m = linalg::identity(dp.n());
    for &j in alpha {
        let vm = &dp.v * &m;
        m = partition.apply(j, vm.as_ref());
    }
    m
}

/// `sup` of `q∘Φ^{-1}` on the rectangle, from a sample grid plus a Lipschitz margin.
fn sup_preimage(map: &TorusMap, q: &Observable, rect: [f64; 4]) -> Result<f64> {
    if q.is_constant() {
        return Ok(q.mean());
    }
    let [a, b, c, d] = map.matrix();
    if !map.is_linear() {
        return Err(Error::LinearOnly);
    }
    let pulled = q.compose_linear([d, -b, -c, a]);
    let lip: f64 = pulled
        .coeffs()
        .iter()
        .map(|(k, z)| 2.0 * PI * z.norm() * ((k.0 * k.0 + k.1 * k.1) as f64).sqrt())
        .sum();
    let s = 64;
    let hx = (rect[1] - rect[0]) / s as f64;
    let hp = (rect[3] - rect[2]) / s as f64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=s {
        for k in 0..=s {
            let r = TorusPoint::new(rect[0] + i as f64 * hx, rect[2] + k as f64 * hp);
            best = best.max(pulled.eval(r));
        }
    }
    Ok(best + lip * 0.5 * hx.hypot(hp))
}

/// `b(j) = sup_{cell j} e^{q∘Φ^{-1}}` over the support (`core = false`) or core squares.
pub fn cell_damping(map: &TorusMap, q: &Observable, partition: &QuantumPartition, core: bool) -> Result<Vec<f64>> {
    (0..partition.j)
        .map(|j| {
            let rect = if core { partition.core(j) } else { partition.support(j) };
            sup_preimage(map, q, rect).map(f64::exp)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolicPath {
    pub alpha: Vec<usize>,
    pub b_alpha: f64,
    pub jplus_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub path: SymbolicPath,
    /// `‖V_α e‖`
    pub norm: f64,
    /// `b_α·J⁺(α)^{−1/2}`
    pub dispersion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBoundReport {
    pub n: usize,
    pub big_n: usize,
    pub rows: Vec<PathRow>,
    /// `max_α ‖V_α e‖ / (N^{1/2}·b_α·J⁺(α)^{−1/2})`
    pub fitted_c: f64,
    /// `max_α ‖V_α e‖ / b_α`
    pub max_over_b: f64,
    /// `‖Σ_α V_α e − V^n e‖`
    pub reconstruction_defect: f64,
    /// Upper bound on `‖Σ_{pruned} V_α e‖`.
    pub pruned_bound: f64,
    pub nodes: usize,
}

/// Columns with norm below this (relative to the input) are pruned.
pub const PRUNE_TOL: f64 = 1e-13;

/// Upper bound on `‖V‖₂` from `‖Op_W(e_k)‖ = 1`.
fn propagator_norm_bound(q: &Observable) -> f64 {
    let osc: f64 = q.coeffs().iter().filter(|(k, _)| **k != (0, 0)).map(|(_, z)| z.norm()).sum();
    (q.mean() + osc).exp()
}

/// Columns per batched product in the path walk.
const PATH_BATCH: usize = 256;

struct Pending {
    cols: Vec<Vec<c64>>,
    alphas: Vec<Vec<usize>>,
}

/// Depth-first walk over the path tree. Children wait in per-(level, x-cell)
/// buffers until a full batch is ready, which bounds memory by
/// `n·L·PATH_BATCH` restricted columns while keeping products wide.
struct PathWalk<'a> {
    dp: &'a DampedPropagator,
    partition: &'a QuantumPartition,
    n: usize,
    tol: f64,
    vnorm: f64,
    v_cols: Vec<CMat>,
    pending: Vec<Vec<Pending>>,
    total: Vec<c64>,
    leaves: Vec<(Vec<usize>, f64)>,
    pruned: f64,
    nodes: usize,
}

impl PathWalk<'_> {
    /// Splits the columns of `y = V·X` (paths of length `level − 1`) over the cells.
    fn expand(&mut self, level: usize, y: &CMat, alphas: &[Vec<usize>]) {
        let part = self.partition;
        let l = part.l();
        let tail = self.vnorm.powi((self.n - level) as i32);
        for a in 0..l {
            let rows = &part.row_sets[a];
            // ‖Π_{ab} y‖ ≤ ‖y|_{R_a}‖ since Π_{ab} lives on R_a × R_a and ‖Π_{ab}‖ ≤ 1
            let live: Vec<usize> = (0..y.ncols())
                .filter(|&c| {
                    let col = y.col(c);
                    let m = rows.iter().map(|&r| col[r].norm_sqr()).sum::<f64>().sqrt();
                    if m < self.tol {
                        self.nodes += l;
                        self.pruned += l as f64 * m * tail;
                        false
                    } else {
                        true
                    }
                })
                .collect();
            if live.is_empty() {
                continue;
            }
            let yr = Mat::from_fn(rows.len(), live.len(), |r, c| y[(rows[r], live[c])]);
            for b in 0..l {
                let j = a * l + b;
                let z = &part.blocks[j] * &yr;
                for (c, &parent) in live.iter().enumerate() {
                    self.nodes += 1;
                    let col = z.col(c);
                    let nrm = col.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                    if nrm < self.tol {
                        // the discarded subtree sums to V^{n-level} z
                        self.pruned += nrm * tail;
                        continue;
                    }
                    let mut alpha = Vec::with_capacity(level);
                    alpha.extend_from_slice(&alphas[parent]);
                    alpha.push(j);
                    let buf = &mut self.pending[level][a];
                    buf.cols.push(col.iter().copied().collect());
                    buf.alphas.push(alpha);
                }
            }
            if self.pending[level][a].cols.len() >= PATH_BATCH {
                self.flush(level, a);
            }
        }
    }

    fn flush(&mut self, level: usize, a: usize) {
        let buf = std::mem::replace(
            &mut self.pending[level][a],
            Pending {
                cols: Vec::new(),
                alphas: Vec::new(),
            },
        );
        if buf.cols.is_empty() {
            return;
        }
        let rows = &self.partition.row_sets[a];
        if level == self.n {
            for (col, alpha) in buf.cols.iter().zip(buf.alphas) {
                let mut nrm2 = 0.0;
                for (v, &r) in col.iter().zip(rows) {
                    self.total[r] += v;
                    nrm2 += v.norm_sqr();
                }
                self.leaves.push((alpha, nrm2.sqrt()));
            }
            return;
        }
        let x = linalg::from_columns(rows.len(), &buf.cols);
        drop(buf.cols);
        let y = &self.v_cols[a] * &x;
        drop(x);
        self.expand(level + 1, &y, &buf.alphas);
    }
}

/// Expands `V^n e` over all symbolic paths with batched products, pruning
/// branches whose norm drops below `PRUNE_TOL·‖e‖`.
pub fn path_bound_check(
    dp: &DampedPropagator,
    partition: &QuantumPartition,
    map: &TorusMap,
    q: &Observable,
    n: usize,
    e: &[c64],
) -> Result<PathBoundReport> {
    path_bound_check_with(dp, partition, map, q, n, e, PRUNE_TOL)
}

pub fn path_bound_check_with(
    dp: &DampedPropagator,
    partition: &QuantumPartition,
    map: &TorusMap,
    q: &Observable,
    n: usize,
    e: &[c64],
    prune_tol: f64,
) -> Result<PathBoundReport> {
    if !map.is_linear() {
        return Err(Error::LinearOnly);
    }
    if n == 0 {
        return Err(Error::Partition("paths need at least one step".into()));
    }
    let big_n = dp.n();
    let lam = map.lambda();
    let b = cell_damping(map, q, partition, false)?;
    let l = partition.l();
    let v_cols = partition
        .row_sets
        .iter()
        .map(|rows| Mat::from_fn(big_n, rows.len(), |i, c| dp.v[(i, rows[c])]))
        .collect();
    let mut walk = PathWalk {
        dp,
        partition,
        n,
        tol: prune_tol * linalg::vec_norm(e),
        vnorm: propagator_norm_bound(q),
        v_cols,
        pending: (0..=n)
            .map(|_| {
                (0..l)
                    .map(|_| Pending {
                        cols: Vec::new(),
                        alphas: Vec::new(),
                    })
                    .collect()
            })
            .collect(),
        total: vec![c64::new(0.0, 0.0); big_n],
        leaves: Vec::new(),
        pruned: 0.0,
        nodes: 0,
    };
    let ve = linalg::matvec(walk.dp.v.as_ref(), e);
    let y = Mat::from_fn(big_n, 1, |i, _| ve[i]);
    walk.expand(1, &y, &[vec![]]);
    for level in 1..=n {
        for a in 0..l {
            walk.flush(level, a);
        }
    }
    let jplus = lam.powi(n as i32);
    let mut fitted_c = 0.0f64;
    let mut max_over_b = 0.0f64;
    let mut rows = Vec::with_capacity(walk.leaves.len());
    for (alpha, norm) in walk.leaves {
        let b_alpha: f64 = alpha.iter().map(|j| b[*j]).product();
        let dispersion = b_alpha / jplus.sqrt();
        fitted_c = fitted_c.max(norm / ((big_n as f64).sqrt() * dispersion));
        max_over_b = max_over_b.max(norm / b_alpha);
        rows.push(PathRow {
            path: SymbolicPath {
                alpha,
                b_alpha,
                jplus_alpha: jplus,
            },
            norm,
            dispersion,
        });
    }
    let exact = dp.apply_power(e, n);
    let defect = walk.total.iter().zip(&exact).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    Ok(PathBoundReport {
        n,
        big_n,
        rows,
        fitted_c,
        max_over_b,
        reconstruction_defect: defect,
        pruned_bound: walk.pruned,
        nodes: walk.nodes,
    })
}

type Poly = Vec<[f64; 2]>;

/// Sutherland–Hodgman step against `sign·(v[axis] − bound) ≥ 0`.
fn clip_half(poly: &Poly, axis: usize, bound: f64, sign: f64) -> Poly {
    let inside = |v: &[f64; 2]| sign * (v[axis] - bound) >= 0.0;
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        let (ci, pi) = (inside(&cur), inside(&prev));
        if ci != pi {
            let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
            let mut v = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])];
            v[axis] = bound;
            out.push(v);
        }
        if ci {
            out.push(cur);
        }
    }
    out
}

fn clip_rect(poly: &Poly, r: [f64; 4]) -> Poly {
    let mut p = clip_half(poly, 0, r[0], 1.0);
    if p.is_empty() {
        return p;
    }
    p = clip_half(&p, 0, r[1], -1.0);
    if p.is_empty() {
        return p;
    }
    p = clip_half(&p, 1, r[2], 1.0);
    if p.is_empty() {
        return p;
    }
    clip_half(&p, 1, r[3], -1.0)
}

fn area(poly: &Poly) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s.abs()
}

/// Pieces below this area are treated as empty.
const AREA_TOL: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderLevel {
    pub n: usize,
    /// Nonempty cylinders `∩_k Φ^{−k}Q_{α_k}` of the core partition.
    pub count: usize,
    /// `Σ_α b_α·λ^{−n/2}`
    pub sum: f64,
}

/// Exact cylinder enumeration for a linear map by polygon clipping.
pub fn cylinder_sums(map: &TorusMap, l: usize, b: &[f64], n: usize) -> Result<Vec<CylinderLevel>> {
    if !map.is_linear() {
        return Err(Error::LinearOnly);
    }
    if l == 0 || b.len() != l * l {
        return Err(Error::Partition(format!("{} cell weights for a {l}x{l} grid", b.len())));
    }
    let [ma, mb, mc, md] = map.matrix().map(|v| v as f64);
    let lam = map.lambda();
    let lf = l as f64;
    let rect = |gx: i64, gp: i64| [gx as f64 / lf, (gx + 1) as f64 / lf, gp as f64 / lf, (gp + 1) as f64 / lf];
    // pieces: (path id, polygon); weights: per path id
    let mut pieces: Vec<(usize, Poly)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (j, &bj) in b.iter().enumerate() {
        let r = rect((j / l) as i64, (j % l) as i64);
        pieces.push((j, vec![[r[0], r[2]], [r[1], r[2]], [r[1], r[3]], [r[0], r[3]]]));
        weights.push(bj);
    }
    let mut levels = vec![CylinderLevel {
        n: 1,
        count: weights.len(),
        sum: weights.iter().sum::<f64>() / lam.sqrt(),
    }];
    for level in 2..=n {
        let mut ids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next_w: Vec<f64> = Vec::new();
        let mut next: Vec<(usize, Poly)> = Vec::new();
        for (pid, poly) in &pieces {
            let img: Poly = poly.iter().map(|v| [ma * v[0] + mb * v[1], mc * v[0] + md * v[1]]).collect();
            let (mut x0, mut x1, mut p0, mut p1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for v in &img {
                x0 = x0.min(v[0]);
                x1 = x1.max(v[0]);
                p0 = p0.min(v[1]);
                p1 = p1.max(v[1]);
            }
            for gx in (x0 * lf).floor() as i64..(x1 * lf).ceil() as i64 {
                for gp in (p0 * lf).floor() as i64..(p1 * lf).ceil() as i64 {
                    let piece = clip_rect(&img, rect(gx, gp));
                    if area(&piece) <= AREA_TOL {
                        continue;
                    }
                    let (sx, sp) = (gx.div_euclid(l as i64), gp.div_euclid(l as i64));
                    let j = (gx.rem_euclid(l as i64) as usize) * l + gp.rem_euclid(l as i64) as usize;
                    let shifted: Poly = piece.iter().map(|v| [v[0] - sx as f64, v[1] - sp as f64]).collect();
                    let id = *ids.entry((*pid, j)).or_insert_with(|| {
                        next_w.push(weights[*pid] * b[j]);
                        next_w.len() - 1
                    });
                    next.push((id, shifted));
                }
            }
        }
        pieces = next;
        weights = next_w;
        levels.push(CylinderLevel {
            n: level,
            count: weights.len(),
            sum: weights.iter().sum::<f64>() / lam.powf(level as f64 / 2.0),
        });
    }
    Ok(levels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureSumReport {
    pub n: usize,
    pub j: usize,
    /// `Σ_α b_α·J⁺(α)^{−1/2}`
    pub lhs: f64,
    /// `e^{n·P(q − φ⁺/2)}`
    pub rhs: f64,
    /// `(1/n)·log lhs`
    pub raw_rate: f64,
    /// `log(lhs_n / lhs_{n−1})`, free of the `log C/n` prefactor bias
    pub ratio_rate: f64,
    pub pressure: f64,
    pub levels: Vec<CylinderLevel>,
}

/// Cylinder sums of the core partition with `J = L²` cells against `P(q − φ⁺/2)`.
pub fn pressure_sum_check(map: &TorusMap, q: &Observable, j: usize, n: usize) -> Result<PressureSumReport> {
    let l = (j as f64).sqrt().round() as usize;
    if l == 0 || l * l != j {
        return Err(Error::Partition(format!("J = {j} is not a perfect square")));
    }
    if n < 2 {
        return Err(Error::Partition("pressure sums need n >= 2".into()));
    }
    let lf = l as f64;
    let b: Vec<f64> = (0..j)
        .map(|c| {
            let (a, bb) = ((c / l) as f64, (c % l) as f64);
            sup_preimage(map, q, [a / lf, (a + 1.0) / lf, bb / lf, (bb + 1.0) / lf]).map(f64::exp)
        })
        .collect::<Result<_>>()?;
    let levels = cylinder_sums(map, l, &b, n)?;
    let lhs = levels[n - 1].sum;
    let prev = levels[n - 2].sum;
    let pressure = thermo::pressure(map, &Potential::new(q.clone(), 1.0, -0.5, 0.0), thermo::DEFAULT_N_RANGE)?.value;
    Ok(PressureSumReport {
        n,
        j,
        lhs,
        rhs: (n as f64 * pressure).exp(),
        raw_rate: lhs.ln() / n as f64,
        ratio_rate: (lhs / prev).ln(),
        pressure,
        levels,
    })
}

/// Polar split `B_s = W·A` of `B_s = U^{−T/2}V^TU^{−T/2}` and the spectral
/// projector `Π₊` of `A` on `[e^{αT}, ∞)`. Stored through the SVD `B_s = YΣZ*`,
/// so `W = YZ*`, `A = ZΣZ*`, `Π₊ = Z₊Z₊*`.
#[derive(Clone, Debug)]
pub struct ProjectorSplit {
    pub t: usize,
    pub alpha_level: f64,
    pub b_s: CMat,
    pub u_half: CMat,
    y: CMat,
    z: CMat,
    sigma: Vec<f64>,
    rank: usize,
}

/// Smallest `σ_min/σ_max` accepted by the polar decomposition.
pub const POLAR_RCOND: f64 = 1e-14;

pub fn projector_split(dp: &DampedPropagator, t: usize, alpha_level: f64) -> Result<ProjectorSplit> {
    if !t.is_multiple_of(2) {
        return Err(Error::Partition(format!("split time must be even, got {t}")));
    }
    let u_half = linalg::power(dp.u.as_ref(), t / 2);
    let b_s = {
        let vt = linalg::power(dp.v.as_ref(), t);
        let tmp = u_half.adjoint() * &vt;
        drop(vt);
        &tmp * u_half.adjoint()
    };
    let svd = b_s.svd().map_err(|_| Error::Eigensolver {
        hash: linalg::matrix_hash(b_s.as_ref()),
    })?;
    let n = dp.n();
    let s = svd.S().column_vector();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| s[*b].re.total_cmp(&s[*a].re));
    let sigma: Vec<f64> = order.iter().map(|i| s[*i].re).collect();
    if sigma[n - 1] < POLAR_RCOND * sigma[0] || !sigma[n - 1].is_finite() {
        return Err(Error::RankDeficient { sigma_min: sigma[n - 1] });
    }
    let (uu, vv) = (svd.U(), svd.V());
    let y = Mat::from_fn(n, n, |i, j| uu[(i, order[j])]);
    let z = Mat::from_fn(n, n, |i, j| vv[(i, order[j])]);
    let level = (alpha_level * t as f64).exp();
    let rank = sigma.iter().filter(|s| **s >= level).count();
    Ok(ProjectorSplit {
        t,
        alpha_level,
        b_s,
        u_half,
        y,
        z,
        sigma,
        rank,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm5 {
    /// `‖AΠ_a U^T W Π_b A‖` for `(a, b) = (+,+), (+,−), (−,+), (−,−)`
    pub terms: [f64; 4],
    /// `‖A‖²·‖Π₊U^TWΠ₊‖`, `‖A‖e^{αT}`, `‖A‖e^{αT}`, `e^{2αT}`
    pub bounds: [f64; 4],
    /// `‖V^{2T}‖`
    pub total: f64,
}

impl ProjectorSplit {
    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    pub fn rank_plus(&self) -> usize {
        self.rank
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn w(&self) -> CMat {
        &self.y * self.z.adjoint()
    }

    pub fn a(&self) -> CMat {
        let n = self.n();
        let zs = Mat::from_fn(n, n, |i, j| self.z[(i, j)] * self.sigma[j]);
        &zs * self.z.adjoint()
    }

    fn projector(&self, plus: bool) -> CMat {
        let n = self.n();
        let cols: Vec<usize> = if plus { (0..self.rank).collect() } else { (self.rank..n).collect() };
        let zp = Mat::from_fn(n, cols.len(), |i, j| self.z[(i, cols[j])]);
        &zp * zp.adjoint()
    }

    pub fn pi_plus(&self) -> CMat {
        self.projector(true)
    }

    pub fn pi_minus(&self) -> CMat {
        self.projector(false)
    }

    /// `‖WA − B_s‖_F / ‖B_s‖₂`.
    pub fn polar_defect(&self) -> f64 {
        let wa = &self.w() * &self.a();
        let d = &wa - &self.b_s;
        linalg::frobenius(d.as_ref()) / self.sigma[0]
    }

    /// `‖AΠ₋‖₂`.
    pub fn a_minus_norm(&self) -> f64 {
        self.sigma.get(self.rank).copied().unwrap_or(0.0)
    }

    /// `W e` for a vector.
    pub fn apply_w(&self, e: &[c64]) -> Vec<c64> {
        let ze = linalg::adjoint_matvec(self.z.as_ref(), e);
        linalg::matvec(self.y.as_ref(), &ze)
    }

    /// `Z* U^T Y` where `U^T` is the `T`-th power of the propagator.
    fn gram(&self) -> CMat {
        let uy = &self.u_half * &self.y;
        let uuy = &self.u_half * &uy;
        self.z.adjoint() * &uuy
    }

    /// `‖Π₊ U^T W Π₊‖₂`.
    pub fn dispersion_norm(&self) -> Result<f64> {
        if self.rank == 0 {
            return Ok(0.0);
        }
        let n = self.n();
        let yp = Mat::from_fn(n, self.rank, |i, j| self.y[(i, j)]);
        let zp = Mat::from_fn(n, self.rank, |i, j| self.z[(i, j)]);
        let uy = &self.u_half * &yp;
        let uuy = &self.u_half * &uy;
        let g = zp.adjoint() * &uuy;
        linalg::spectral_norm(g.as_ref())
    }

    /// The four pieces of `A U^T W A = B_s U^T B_s`, whose norm is `‖V^{2T}‖`.
    pub fn norm5(&self) -> Result<Norm5> {
        let n = self.n();
        let g = self.gram();
        let r = self.rank;
        let block = |rows: (usize, usize), cols: (usize, usize)| -> Result<f64> {
            if rows.0 == rows.1 || cols.0 == cols.1 {
                return Ok(0.0);
            }
            let m = Mat::from_fn(rows.1 - rows.0, cols.1 - cols.0, |i, j| {
                g[(rows.0 + i, cols.0 + j)] * (self.sigma[rows.0 + i] * self.sigma[cols.0 + j])
            });
            linalg::spectral_norm(m.as_ref())
        };
        let (p, m) = ((0, r), (r, n));
        let terms = [block(p, p)?, block(p, m)?, block(m, p)?, block(m, m)?];
        let level = (self.alpha_level * self.t as f64).exp();
        let a = self.sigma[0];
        let bounds = [a * a * self.dispersion_norm()?, a * level, level * a, level * level];
        let full = Mat::from_fn(n, n, |i, j| g[(i, j)] * (self.sigma[i] * self.sigma[j]));
        Ok(Norm5 {
            terms,
            bounds,
            total: linalg::spectral_norm(full.as_ref())?,
        })
    }

    /// Largest `|log(⟨e_ρ, A e_ρ⟩ / e^{T⟨q⟩_{T,sym}(ρ)})|` over a `side × side` sample of `ρ`.
    pub fn symbol_check(&self, map: &TorusMap, q: &Observable, grid: &HilbertGrid, side: usize) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..side {
            for k in 0..side {
                let rho = TorusPoint::new((i as f64 + 0.37) / side as f64, (k as f64 + 0.61) / side as f64);
                let e = qtorus::coherent_state(rho, grid, 1.0).vector;
                let ze = linalg::adjoint_matvec(self.z.as_ref(), &e);
                let quad: f64 = ze.iter().zip(&self.sigma).map(|(c, s)| c.norm_sqr() * s).sum();
                let pred = if self.t == 0 {
                    0.0
                } else {
                    self.t as f64 * classical::birkhoff_average(map, q, rho, self.t, true)
                };
                worst = worst.max((quad.ln() - pred).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormScan {
    pub points: Vec<(usize, f64)>,
    /// `e` in `‖Π₊U^TWΠ₊‖ ∝ N^{−e}`
    pub exponent: f64,
    /// `β(α)/λ_max`
    pub target: f64,
}

/// Fits `‖Π₊U^TWΠ₊‖` against `N`.
pub fn dispersion_norm_scan(splits: &[&ProjectorSplit], beta_alpha: f64, lambda_max: f64) -> Result<NormScan> {
    let mut points = Vec::new();
    for s in splits {
        points.push((s.n(), s.dispersion_norm()?));
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.1 > 0.0)
        .map(|p| ((p.0 as f64).ln(), p.1.ln()))
        .collect();
    let exponent = if fit.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = fit.into_iter().unzip();
        -crate::spectra::least_squares(&x, &y).0
    } else {
        f64::INFINITY
    };
    Ok(NormScan {
        points,
        exponent,
        target: beta_alpha / lambda_max,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalLevel {
    pub alpha_c: f64,
    pub beta_c: f64,
    /// Certified gap: strictly below `(q₊ − α_c)/2`.
    pub gamma: f64,
    /// `|β(α_c) − (q₊ − α_c)|`
    pub residual: f64,
    pub q_plus: f64,
}

/// Root of `β(α) = q₊ − α` on `(q̄, q₊)` by bisection.
pub fn critical_level(model: &PressureModel, nu_min: f64, lambda_max: f64) -> Result<CriticalLevel> {
    let beta_grid = thermo::default_beta_grid();
    let (_, q_plus, _, _) = model.orbit_extremes();
    let q_bar = model.q().mean();
    let g = |alpha: f64| -> f64 {
        let h = model.legendre_inf(&beta_grid, alpha).min(0.0);
        thermo::beta_of_alpha(nu_min, lambda_max, h) - (q_plus - alpha)
    };
    let span = q_plus - q_bar;
    if span <= 0.0 {
        return Err(Error::Condition0 { lo: q_bar, hi: q_plus });
    }
    let (mut lo, mut hi) = (q_bar + 1e-9 * span, q_plus - 1e-9 * span);
    let (glo, ghi) = (g(lo), g(hi));
    if glo.signum() == ghi.signum() {
        return Err(Error::Condition0 { lo: q_bar, hi: q_plus });
    }
    let rising = ghi > glo;
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if (g(mid) > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let alpha_c = 0.5 * (lo + hi);
    let h = model.legendre_inf(&beta_grid, alpha_c).min(0.0);
    let beta_c = thermo::beta_of_alpha(nu_min, lambda_max, h);
    Ok(CriticalLevel {
        alpha_c,
        beta_c,
        gamma: 0.5 * (q_plus - alpha_c) - 1e-6,
        residual: (beta_c - (q_plus - alpha_c)).abs(),
        q_plus,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// `|⟨U^{−T/2}e_{ρ₂}, U^{T/2}W e_{ρ₁}⟩|`
    pub measured: f64,
    /// `(J⁺_{T/2}(ρ₁)·J⁺_{T/2}(Φ^{−T/2}ρ₂))^{−1/2}`
    pub shape: f64,
    /// `‖(W − I)e_{ρ₁}‖`, zero when `W` is taken as the identity
    pub w_defect: f64,
}

impl Overlap {
    pub fn fitted_c(&self) -> f64 {
        self.measured / self.shape
    }
}

pub fn coherent_overlap_check(
    dp: &DampedPropagator,
    map: &TorusMap,
    rho1: TorusPoint,
    rho2: TorusPoint,
    t: usize,
    split: Option<&ProjectorSplit>,
) -> Result<Overlap> {
    if !t.is_multiple_of(2) {
        return Err(Error::Partition(format!("overlap time must be even, got {t}")));
    }
    let grid = dp.grid;
    let e1 = qtorus::coherent_state(rho1, &grid, 1.0).vector;
    let e2 = qtorus::coherent_state(rho2, &grid, 1.0).vector;
    let (we1, w_defect) = match split {
        Some(s) => {
            let w = s.apply_w(&e1);
            let d = w.iter().zip(&e1).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            (w, d)
        }
        None => (e1.clone(), 0.0),
    };
    let mut a = e2;
    let mut b = we1;
    for _ in 0..t / 2 {
        a = linalg::adjoint_matvec(dp.u.as_ref(), &a);
        b = linalg::matvec(dp.u.as_ref(), &b);
    }
    let measured = linalg::inner(&a, &b).norm();
    let half = t / 2;
    let j1 = classical::tangent_data(map, rho1, half)?.j_plus;
    let j2 = classical::tangent_data(map, classical::evolve(map, rho2, -(half as i64)), half)?.j_plus;
    Ok(Overlap {
        measured,
        shape: 1.0 / (j1 * j2).sqrt(),
        w_defect,
    })
}
