//! Quantization on the `N`-dimensional torus Hilbert space.
//!
//! Positions are `x_j = j/N`, `ħ = 1/(2πN)`. The Weyl translation of the
//! Fourier mode `e_k(x, p) = e^{2πi(k₁x + k₂p)}` is
//! `(T_k ψ)(j) = e^{iπk₁k₂/N} e^{2πik₁j/N} ψ(j + k₂)`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use faer::{c64, Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::classical::{Observable, TorusMap, TorusPoint};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HilbertGrid {
    n: usize,
    hbar: f64,
}

impl HilbertGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("Hilbert space"));
        }
        Ok(Self {
            n,
            hbar: 1.0 / (2.0 * PI * n as f64),
        })
    }

    /// Grid checked against the parity condition of `map`.
    pub fn for_map(map: &TorusMap, n: usize) -> Result<Self> {
        check_parity(map, n)?;
        Self::new(n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }
}

fn cis(theta: f64) -> c64 {
    let (s, c) = theta.sin_cos();
    c64::new(c, s)
}

fn check_parity(map: &TorusMap, n: usize) -> Result<()> {
    let [a, b, _, d] = map.matrix();
    if b.abs() != 1 {
        return Err(Error::UnsupportedQuantization(format!(
            "only |b| = 1 is implemented, got b = {b}"
        )));
    }
    let needs_even = a % 2 != 0 || d % 2 != 0;
    if needs_even && !n.is_multiple_of(2) {
        return Err(Error::Parity {
            n,
            admissible: "N ≡ 0 (mod 2)".into(),
        });
    }
    Ok(())
}

/// Matrix of the Weyl translation `T_k`.
pub fn weyl_translation(grid: &HilbertGrid, k: (i32, i32)) -> CMat {
    let n = grid.n;
    let mut t = Mat::<c64>::zeros(n, n);
    let nn = n as i64;
    let (k1, k2) = (k.0 as i64, k.1 as i64);
    let pre = PI * (k1 * k2) as f64 / n as f64;
    for j in 0..n {
        let col = (j as i64 + k2).rem_euclid(nn) as usize;
        let ph = pre + 2.0 * PI * ((k1 * j as i64).rem_euclid(nn)) as f64 / n as f64;
        t[(j, col)] = cis(ph);
    }
    t
}

/// Metaplectic propagator of a linear cat map, normalized so that
/// `U*·Op(f)·U = Op(f∘M)` and `U e_ρ ≈ e_{Mρ}`.
pub fn quantize_cat(map: &TorusMap, grid: &HilbertGrid) -> Result<CMat> {
    if !map.is_linear() {
        return Err(Error::LinearOnly);
    }
    check_parity(map, grid.n)?;
    let [a, b, _, d] = map.matrix();
    let n = grid.n;
    let nn = n as i64;
    let bf = b as f64;
    let norm = 1.0 / (n as f64).sqrt();
    let front = cis(-bf * PI / 4.0) * norm;
    // exponent iπ(a·k² − 2jk + d·j²)/(N·b), reduced mod 2N for accuracy
    let two_n = 2 * nn;
    let ar = a.rem_euclid(two_n);
    let dr = d.rem_euclid(two_n);
    let kernel = Mat::from_fn(n, n, |j, k| {
        let (j, k) = (j as i64, k as i64);
        let e = (ar * ((k * k) % two_n) - 2 * j * k + dr * ((j * j) % two_n)).rem_euclid(two_n);
        front * cis(PI * e as f64 / (n as f64 * bf))
    });
    Ok(kernel)
}

/// Quantization scheme for observables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Weyl,
    AntiWick,
}

/// Side of the quadrature grid used by anti-Wick quantization, per unit of `N`.
pub const ANTI_WICK_OVERSAMPLE: usize = 4;

pub fn quantize_observable(q: &Observable, grid: &HilbertGrid, scheme: Scheme) -> CMat {
    let n = grid.n;
    let mut out = Mat::<c64>::zeros(n, n);
    for (&k, &c) in q.coeffs() {
        let w = match scheme {
            Scheme::Weyl => c,
            Scheme::AntiWick => c * anti_wick_factor(grid, k, 1.0),
        };
        add_translation(&mut out, grid, k, w);
    }
    if scheme == Scheme::Weyl {
        return out;
    }
    linalg::hermitian_part(out.as_ref())
}

fn add_translation(out: &mut CMat, grid: &HilbertGrid, k: (i32, i32), w: c64) {
    let n = grid.n;
    let nn = n as i64;
    let (k1, k2) = (k.0 as i64, k.1 as i64);
    let pre = PI * (k1 * k2) as f64 / n as f64;
    for j in 0..n {
        let col = (j as i64 + k2).rem_euclid(nn) as usize;
        let ph = pre + 2.0 * PI * ((k1 * j as i64).rem_euclid(nn)) as f64 / n as f64;
        out[(j, col)] += w * cis(ph);
    }
}

/// `Op_AW(e_k) = g_k·T_k`. The quadrature sum over the `(4N)²` grid of
/// coherent projectors is covariant under the `1/N` lattice, so `g_k` is
/// the average of `e_k(ρ)⟨e_ρ, T_k* e_ρ⟩` over the 16 grid points of one cell.
/// The projector sum is normalized by `tr(S)/N`.
fn anti_wick_factor(grid: &HilbertGrid, k: (i32, i32), squeeze: f64) -> c64 {
    if k == (0, 0) {
        return c64::new(1.0, 0.0);
    }
    let n = grid.n;
    let m = ANTI_WICK_OVERSAMPLE;
    let step = 1.0 / (m * n) as f64;
    let t = weyl_translation(grid, k);
    let mut acc = c64::new(0.0, 0.0);
    for a in 0..m {
        for b in 0..m {
            let rho = TorusPoint::new(a as f64 * step, b as f64 * step);
            let e = coherent_vector(rho, grid, squeeze);
            let te = linalg::matvec(t.as_ref(), &e);
            // ⟨e, T_k* e⟩ = conj⟨e, T_k e⟩
            let val = linalg::inner(&e, &te).conj();
            acc += val * cis(2.0 * PI * (k.0 as f64 * rho.x + k.1 as f64 * rho.p));
        }
    }
    acc * (1.0 / (m * m) as f64)
}

/// Closed form of the anti-Wick factor for `squeeze = 1`: the Wigner function of a
/// coherent state is a Gaussian of variance `1/(4πN)` per axis, so
/// `g_k = exp(−π|k|²/(2N))` up to periodization terms of size `e^{−πN/2}`.
pub fn anti_wick_gaussian(n: usize, k: (i64, i64)) -> f64 {
    (-PI * ((k.0 * k.0 + k.1 * k.1) as f64) / (2.0 * n as f64)).exp()
}

/// Direct quadrature `Σ_ρ q(ρ)|e_ρ⟩⟨e_ρ| / (tr S/N)` over the `(4N)²` grid.
/// Quartic in `N`; meant for cross-checking at small `N`.
pub fn anti_wick_direct(q: &Observable, grid: &HilbertGrid) -> CMat {
    let n = grid.n;
    let g = ANTI_WICK_OVERSAMPLE * n;
    let mut s = Mat::<c64>::zeros(n, n);
    let mut tr = 0.0;
    for a in 0..g {
        for b in 0..g {
            let rho = TorusPoint::new(a as f64 / g as f64, b as f64 / g as f64);
            let e = coherent_vector(rho, grid, 1.0);
            let w = q.eval(rho);
            tr += linalg::vec_norm(&e).powi(2);
            for i in 0..n {
                for j in 0..n {
                    s[(i, j)] += e[i] * e[j].conj() * w;
                }
            }
        }
    }
    linalg::scaled(s.as_ref(), c64::new(n as f64 / tr, 0.0))
}

#[derive(Clone, Debug)]
pub struct DampedPropagator {
    pub grid: HilbertGrid,
    pub u: CMat,
    pub b: CMat,
    pub v: CMat,
}

impl DampedPropagator {
    pub fn n(&self) -> usize {
        self.grid.n
    }

    /// `V^n x` by repeated application.
    pub fn apply_power(&self, x: &[c64], n: usize) -> Vec<c64> {
        let mut y = x.to_vec();
        for _ in 0..n {
            y = linalg::matvec(self.v.as_ref(), &y);
        }
        y
    }

    /// `‖V^n − U^n·B_n‖₂ / ‖V^n‖₂` with `B_n = (U^{-(n-1)}BU^{n-1})···(U^{-1}BU)·B`.
    pub fn factorization_defect(&self, n: usize) -> Result<f64> {
        let vn = linalg::power(self.v.as_ref(), n);
        let mut bn = linalg::identity(self.n());
        let mut conj = self.b.clone();
        for i in 0..n {
            if i > 0 {
                conj = self.u.adjoint() * &conj * &self.u;
            }
            bn = &conj * &bn;
        }
        let un = linalg::power(self.u.as_ref(), n);
        let rhs = &un * &bn;
        Ok(linalg::spectral_diff(vn.as_ref(), rhs.as_ref())? / linalg::spectral_norm(vn.as_ref())?)
    }
}

/// `V = U·exp(Op_W(q))`.
pub fn damped_propagator(map: &TorusMap, q: &Observable, grid: &HilbertGrid) -> Result<DampedPropagator> {
    let u = quantize_cat(map, grid)?;
    let b = if q.is_constant() {
        linalg::scaled(linalg::identity(grid.n).as_ref(), c64::new(q.mean().exp(), 0.0))
    } else {
        let h = quantize_observable(q, grid, Scheme::Weyl);
        linalg::hermitian_function(h.as_ref(), f64::exp)?
    };
    let v = &u * &b;
    Ok(DampedPropagator { grid: *grid, u, b, v })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoherentState {
    pub center: TorusPoint,
    pub vector: Vec<c64>,
    pub squeeze: f64,
}

/// Unnormalized periodized Gaussian
/// `Σ_m exp(−πN(x_j − m − q)²/s + 2πiNp(x_j − m − q))`.
fn coherent_raw(rho: TorusPoint, grid: &HilbertGrid, squeeze: f64) -> Vec<c64> {
    let n = grid.n;
    let nf = n as f64;
    // terms with exp(−πN d²/s) below 1e-30 are dropped
    let reach = (69.0 * squeeze / (PI * nf)).sqrt().ceil() as i64 + 1;
    (0..n)
        .map(|j| {
            let xj = j as f64 / nf;
            let mut z = c64::new(0.0, 0.0);
            for m in -reach..=reach {
                let d = xj - m as f64 - rho.x;
                let g = (-PI * nf * d * d / squeeze).exp();
                if g > 0.0 {
                    z += cis(2.0 * PI * nf * rho.p * d) * g;
                }
            }
            z
        })
        .collect()
}

fn coherent_vector(rho: TorusPoint, grid: &HilbertGrid, squeeze: f64) -> Vec<c64> {
    let mut v = coherent_raw(rho, grid, squeeze);
    let nrm = linalg::vec_norm(&v);
    for z in v.iter_mut() {
        *z *= 1.0 / nrm;
    }
    v
}

pub fn coherent_state(center: TorusPoint, grid: &HilbertGrid, squeeze: f64) -> CoherentState {
    CoherentState {
        center,
        vector: coherent_vector(center, grid, squeeze),
        squeeze,
    }
}

/// Husimi density of `psi` on a `side × side` phase-space grid, normalized to unit mass.
/// Entry `[a][b]` belongs to `(x, p) = (a/side, b/side)`.
pub fn husimi(psi: &[c64], grid: &HilbertGrid, side: usize, squeeze: f64) -> Vec<Vec<f64>> {
    let mut h = vec![vec![0.0; side]; side];
    let mut total = 0.0;
    for (a, row) in h.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let rho = TorusPoint::new(a as f64 / side as f64, b as f64 / side as f64);
            let e = coherent_vector(rho, grid, squeeze);
            *cell = linalg::inner(&e, psi).norm_sqr();
            total += *cell;
        }
    }
    if total > 0.0 {
        for row in h.iter_mut() {
            for cell in row.iter_mut() {
                *cell /= total;
            }
        }
    }
    h
}

/// Husimi mass of `psi` within torus distance `radius` of `center`.
pub fn husimi_mass_near(psi: &[c64], grid: &HilbertGrid, side: usize, center: TorusPoint, radius: f64) -> f64 {
    let h = husimi(psi, grid, side, 1.0);
    let mut m = 0.0;
    for (a, row) in h.iter().enumerate() {
        for (b, cell) in row.iter().enumerate() {
            let rho = TorusPoint::new(a as f64 / side as f64, b as f64 / side as f64);
            if rho.dist(&center) <= radius {
                m += cell;
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgorovDamping {
    pub measured: f64,
    pub predicted: f64,
}

impl EgorovDamping {
    pub fn ratio(&self) -> f64 {
        self.measured / self.predicted
    }
}

/// `‖V^n e_ρ‖` against `exp(Σ_{i<n} q(Φ^i ρ))`.
pub fn egorov_damping_check(
    dp: &DampedPropagator,
    map: &TorusMap,
    q: &Observable,
    rho: TorusPoint,
    n: usize,
) -> EgorovDamping {
    let e = coherent_vector(rho, &dp.grid, 1.0);
    let measured = linalg::vec_norm(&dp.apply_power(&e, n));
    let mut s = 0.0;
    let mut r = rho;
    for _ in 0..n {
        s += q.eval(r);
        r = map.step(r);
    }
    EgorovDamping {
        measured,
        predicted: s.exp(),
    }
}

/// Largest deviation `‖U*T_kU − c·T_{kM}‖` over `|k|∞ ≤ kmax`, with `c` the best phase.
pub fn egorov_defect(u: MatRef<'_, c64>, map: &TorusMap, grid: &HilbertGrid, kmax: i32) -> f64 {
    let [a, b, c, d] = map.matrix();
    let mut worst = 0.0f64;
    for k1 in -kmax..=kmax {
        for k2 in -kmax..=kmax {
            let t = weyl_translation(grid, (k1, k2));
            let lhs = u.adjoint() * &t * u;
            let km = (
                (k1 as i64 * a + k2 as i64 * c) as i32,
                (k1 as i64 * b + k2 as i64 * d) as i32,
            );
            let tm = weyl_translation(grid, km);
            let phase = linalg::trace((tm.adjoint() * &lhs).as_ref()) * (1.0 / grid.n as f64);
            let target = linalg::scaled(tm.as_ref(), phase);
            worst = worst.max(linalg::max_diff(lhs.as_ref(), target.as_ref()));
            worst = worst.max((phase.norm() - 1.0).abs());
        }
    }
    worst
}

/// Binary matrix container: magic `DLMX`, `u32` little-endian `N`, then
/// `N²` row-major `(re, im)` pairs of little-endian `f64`.
pub const MATRIX_MAGIC: [u8; 4] = *b"DLMX";

pub fn write_matrix(w: &mut impl Write, a: MatRef<'_, c64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Empty("square matrix"));
    }
    let mut buf = Vec::with_capacity(8 + 16 * a.nrows() * a.ncols());
    buf.extend_from_slice(&MATRIX_MAGIC);
    buf.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            buf.extend_from_slice(&a[(i, j)].re.to_le_bytes());
            buf.extend_from_slice(&a[(i, j)].im.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<CMat> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if head[..4] != MATRIX_MAGIC {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad matrix magic",
        )));
    }
    let n = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
    let bad = |msg: &str| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()));
    let len = n.checked_mul(n).and_then(|m| m.checked_mul(16)).ok_or_else(|| bad("matrix size overflows"))?;
    // a corrupt header must not trigger a huge allocation
    let mut body = Vec::new();
    r.take(len as u64).read_to_end(&mut body)?;
    if body.len() != len {
        return Err(bad("truncated matrix body"));
    }
    let f = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    Ok(Mat::from_fn(n, n, |i, j| {
        let o = 16 * (i * n + j);
        c64::new(f(o), f(o + 8))
    }))
}

/// Largest size exported as JSON.
pub const JSON_MATRIX_CAP: usize = 32;

/// Rows of `[re, im]` pairs.
pub fn matrix_to_json(a: MatRef<'_, c64>) -> Result<serde_json::Value> {
    if a.nrows() > JSON_MATRIX_CAP {
        return Err(Error::DenseCap {
            n: a.nrows(),
            cap: JSON_MATRIX_CAP,
        });
    }
    let rows: Vec<Vec<[f64; 2]>> = (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| [a[(i, j)].re, a[(i, j)].im]).collect())
        .collect();
    Ok(serde_json::to_value(rows)?)
}
