//! Damped wave equation `(∂ₜ² − Δ + 2a∂ₜ)u = 0` on the flat circle and 2-torus.
//!
//! Each circle has circumference 2π, so `−Δ` has eigenvalues `|k|²` and geodesics
//! have unit speed. Profiles are written in the normalized coordinate
//! `x ∈ [0, 1)`, i.e. `θ = 2πx`. Galerkin truncation keeps `|k_i| ≤ K`; in 2-D the
//! damping depends on `x` only, which splits the generator into one block per `k₂`.

use std::f64::consts::PI;

use faer::linalg::solvers::Solve;
use faer::{c64, Mat, MatRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::spectra::{self, SpectrumRecord, Source};

/// Sample count of the grid used for extrema, positivity, and strip coefficients.
const PROFILE_GRID: usize = 8192;
/// Fourier coefficients below this size do not count towards the bandwidth.
const BANDWIDTH_TOL: f64 = 1e-12;

fn cis(theta: f64) -> c64 {
    let (s, c) = theta.sin_cos();
    c64::new(c, s)
}

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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `a(x) = cos[0] + Σ_{m≥1} (cos[m]·cos 2πmx + sin[m]·sin 2πmx)`.
    Trig { cos: Vec<f64>, sin: Vec<f64> },
    /// Smooth profile that vanishes on `[lo, hi]` and equals `height` once the
    /// distance to that interval exceeds `ramp`.
    VanishingStrip { lo: f64, hi: f64, ramp: f64, height: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProfileSpec {
    dim: usize,
    shape: Shape,
}

/// Nonnegative damping `a(x)` on the circle (`dim = 1`) or the 2-torus (`dim = 2`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ProfileSpec", into = "ProfileSpec")]
pub struct DampingProfile {
    dim: usize,
    shape: Shape,
    a_min: f64,
    a_max: f64,
    // â_m for m ≥ 0; â_{−m} = conj(â_m)
    fourier: Vec<c64>,
}

impl PartialEq for DampingProfile {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.shape == other.shape
    }
}

impl TryFrom<ProfileSpec> for DampingProfile {
    type Error = Error;
    fn try_from(s: ProfileSpec) -> Result<Self> {
        DampingProfile::new(s.dim, s.shape)
    }
}

impl From<DampingProfile> for ProfileSpec {
    fn from(p: DampingProfile) -> Self {
        ProfileSpec {
            dim: p.dim,
            shape: p.shape,
        }
    }
}

fn strip_value(x: f64, lo: f64, hi: f64, ramp: f64, height: f64) -> f64 {
    let x = x.rem_euclid(1.0);
    let inside = |y: f64| y >= lo && y <= hi;
    if inside(x) || inside(x + 1.0) || inside(x - 1.0) {
        return 0.0;
    }
    let d = [lo - x, x - hi, lo - (x - 1.0), (x + 1.0) - hi, lo - (x + 1.0), (x - 1.0) - hi]
        .into_iter()
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    height * smooth_step(d / ramp)
}

impl DampingProfile {
    pub fn new(dim: usize, shape: Shape) -> Result<Self> {
        Self::build(dim, shape, false)
    }

    /// `a ≡ 0`, the undamped reference problem.
    pub fn undamped(dim: usize) -> Result<Self> {
        Self::build(dim, Shape::Trig { cos: vec![0.0], sin: vec![] }, true)
    }

    fn build(dim: usize, shape: Shape, allow_zero: bool) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::Damping(format!("dimension must be 1 or 2, got {dim}")));
        }
        let fourier = match &shape {
            Shape::Trig { cos, sin } => {
                if cos.is_empty() {
                    return Err(Error::Damping("empty cosine coefficient list".into()));
                }
                let m = cos.len().max(sin.len());
                (0..m)
                    .map(|i| {
                        let c = cos.get(i).copied().unwrap_or(0.0);
                        let s = if i == 0 { 0.0 } else { sin.get(i).copied().unwrap_or(0.0) };
                        if i == 0 {
                            c64::new(c, 0.0)
                        } else {
                            // c cos + s sin = ((c − is)/2) e^{iθ} + conj
                            c64::new(c / 2.0, -s / 2.0)
                        }
                    })
                    .collect()
            }
            Shape::VanishingStrip { lo, hi, ramp, height } => {
                if !(hi >= lo && hi - lo < 1.0 && *ramp > 0.0 && *height > 0.0) {
                    return Err(Error::Damping(format!(
                        "strip needs lo <= hi < lo + 1, ramp > 0, height > 0; got lo={lo}, hi={hi}, ramp={ramp}, height={height}"
                    )));
                }
                let mut buf: Vec<c64> = (0..PROFILE_GRID)
                    .map(|j| c64::new(strip_value(j as f64 / PROFILE_GRID as f64, *lo, *hi, *ramp, *height), 0.0))
                    .collect();
                FftPlanner::new().plan_fft_forward(PROFILE_GRID).process(&mut buf);
                let scale = 1.0 / PROFILE_GRID as f64;
                let mut coeffs: Vec<c64> = buf[..PROFILE_GRID / 2].iter().map(|z| z * scale).collect();
                let last = coeffs.iter().rposition(|z| z.norm() > 1e-17).unwrap_or(0);
                coeffs.truncate(last + 1);
                coeffs
            }
        };
        let mut p = Self {
            dim,
            shape,
            a_min: 0.0,
            a_max: 0.0,
            fourier,
        };
        let (lo, hi) = (0..PROFILE_GRID)
            .map(|j| p.eval(j as f64 / PROFILE_GRID as f64))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if lo < -1e-12 {
            return Err(Error::Damping(format!("damping must be nonnegative, minimum {lo:.3e}")));
        }
        if hi <= 0.0 && !allow_zero {
            return Err(Error::Damping("damping vanishes identically".into()));
        }
        p.a_min = lo.max(0.0);
        p.a_max = hi;
        if let Shape::VanishingStrip { height, .. } = p.shape {
            p.a_min = 0.0;
            p.a_max = height;
        }
        Ok(p)
    }

    pub fn constant(dim: usize, c: f64) -> Result<Self> {
        Self::new(dim, Shape::Trig { cos: vec![c], sin: vec![] })
    }

    /// `c0 + amp·cos 2πx`.
    pub fn cosine(dim: usize, c0: f64, amp: f64) -> Result<Self> {
        Self::new(dim, Shape::Trig { cos: vec![c0, amp], sin: vec![] })
    }

    pub fn strip(dim: usize, lo: f64, hi: f64, ramp: f64, height: f64) -> Result<Self> {
        Self::new(dim, Shape::VanishingStrip { lo, hi, ramp, height })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn a_min(&self) -> f64 {
        self.a_min
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn mean(&self) -> f64 {
        self.fourier[0].re
    }

    pub fn is_constant(&self) -> bool {
        self.fourier.iter().skip(1).all(|z| *z == c64::new(0.0, 0.0))
    }

    /// `â_m`, the coefficient of `e^{2πimx}`.
    pub fn coeff(&self, m: i64) -> c64 {
        let i = m.unsigned_abs() as usize;
        let z = self.fourier.get(i).copied().unwrap_or(c64::new(0.0, 0.0));
        if m < 0 {
            z.conj()
        } else {
            z
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if let Shape::VanishingStrip { lo, hi, ramp, height } = self.shape {
            return strip_value(x, lo, hi, ramp, height);
        }
        let mut s = self.fourier[0].re;
        for (m, z) in self.fourier.iter().enumerate().skip(1) {
            let w = cis(2.0 * PI * m as f64 * x);
            s += 2.0 * (z.re * w.re - z.im * w.im);
        }
        s
    }

    /// Largest `m` with `|â_m| > 1e-12`.
    pub fn bandwidth(&self) -> usize {
        self.fourier.iter().rposition(|z| z.norm() > BANDWIDTH_TOL).unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct WaveBlock {
    pub k2: i64,
    /// `[[0, I], [−Δ, −2ia]]` on the modes `k₁ = −K..=K`.
    pub mat: CMat,
}

#[derive(Clone, Debug)]
pub struct WaveGenerator {
    pub profile: DampingProfile,
    pub k_max: usize,
    pub blocks: Vec<WaveBlock>,
    /// The damping has Fourier content beyond `K`.
    pub under_resolved: bool,
}

impl WaveGenerator {
    /// Modes per block, `2K + 1`.
    pub fn modes(&self) -> usize {
        2 * self.k_max + 1
    }

    pub fn k1(&self, i: usize) -> i64 {
        i as i64 - self.k_max as i64
    }

    pub fn block(&self, k2: i64) -> Option<&WaveBlock> {
        self.blocks.iter().find(|b| b.k2 == k2)
    }
}

pub fn assemble_generator(a: &DampingProfile, k_max: usize) -> Result<WaveGenerator> {
    if k_max < 4 {
        return Err(Error::WaveData(format!("truncation K must be at least 4, got {k_max}")));
    }
    let m = 2 * k_max + 1;
    let kk = k_max as i64;
    let k2s: Vec<i64> = if a.dim == 1 { vec![0] } else { (-kk..=kk).collect() };
    let toeplitz = Mat::from_fn(m, m, |i, j| a.coeff(i as i64 - j as i64));
    let blocks = k2s
        .into_iter()
        .map(|k2| {
            let mut mat = Mat::<c64>::zeros(2 * m, 2 * m);
            for i in 0..m {
                let k1 = i as i64 - kk;
                mat[(i, m + i)] = c64::new(1.0, 0.0);
                mat[(m + i, i)] = c64::new((k1 * k1 + k2 * k2) as f64, 0.0);
                for j in 0..m {
                    let t = toeplitz[(i, j)];
                    // −2i·t
                    mat[(m + i, m + j)] = c64::new(2.0 * t.im, -2.0 * t.re);
                }
            }
            WaveBlock { k2, mat }
        })
        .collect();
    Ok(WaveGenerator {
        profile: a.clone(),
        k_max,
        blocks,
        under_resolved: a.bandwidth() > k_max,
    })
}

#[derive(Clone, Debug)]
pub struct WaveMode {
    pub k2: i64,
    pub tau: c64,
    /// Unit-norm displacement part over `k₁ = −K..=K`.
    pub u: Vec<c64>,
}

#[derive(Clone, Debug)]
pub struct WaveSpectrum {
    pub dim: usize,
    pub truncation: usize,
    pub modes: Vec<WaveMode>,
    /// Largest pencil residual `‖(−Δ − τ² − 2iaτ)u‖ / (1 + |τ|²)`.
    pub residual: f64,
}

impl WaveSpectrum {
    pub fn taus(&self) -> Vec<c64> {
        self.modes.iter().map(|m| m.tau).collect()
    }

    /// Largest distance from `−conj(τ)` to the spectrum of the same block.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        let mut by_block: std::collections::BTreeMap<i64, Vec<c64>> = Default::default();
        for m in &self.modes {
            by_block.entry(m.k2).or_default().push(m.tau);
        }
        for taus in by_block.values() {
            for t in taus {
                let mirror = -t.conj();
                let d = taus.iter().map(|s| (s - mirror).norm()).fold(f64::INFINITY, f64::min);
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Distance from 0 to the spectrum.
    pub fn zero_distance(&self) -> f64 {
        self.modes.iter().map(|m| m.tau.norm()).fold(f64::INFINITY, f64::min)
    }

    /// Modes with `|Re τ| > tol` whose rate `−Im τ` leaves `[lo − tol, hi + tol]`.
    pub fn strip_violations(&self, lo: f64, hi: f64, tol: f64) -> usize {
        self.modes
            .iter()
            .filter(|m| m.tau.re.abs() > tol)
            .filter(|m| -m.tau.im < lo - tol || -m.tau.im > hi + tol)
            .count()
    }

    /// `inf −Im τ` over `τ ≠ 0`.
    pub fn gap(&self) -> f64 {
        self.modes
            .iter()
            .filter(|m| m.tau.norm() > 1e-8)
            .map(|m| -m.tau.im)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_record(&self) -> SpectrumRecord {
        SpectrumRecord::from_values(
            Source::Wave {
                dim: self.dim,
                k_max: self.truncation,
            },
            self.taus(),
            self.residual,
            |t| -t.im,
        )
    }

    /// Columns `re_tau,im_tau`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("re_tau,im_tau\n");
        for m in &self.modes {
            s.push_str(&format!("{:.17e},{:.17e}\n", m.tau.re, m.tau.im));
        }
        s
    }
}

fn block_spectrum(gen: &WaveGenerator, block: &WaveBlock) -> Result<(Vec<WaveMode>, f64)> {
    let m = gen.modes();
    let (vals, vecs) = spectra::eigen_full(block.mat.as_ref())?;
    let a_mat = Mat::from_fn(m, m, |i, j| gen.profile.coeff(gen.k1(i) - gen.k1(j)));
    let mut modes = Vec::with_capacity(vals.len());
    let mut residual = 0.0f64;
    for (j, tau) in vals.into_iter().enumerate() {
        let mut u: Vec<c64> = (0..m).map(|i| vecs[(i, j)]).collect();
        let nrm = linalg::vec_norm(&u);
        for z in u.iter_mut() {
            *z *= 1.0 / nrm;
        }
        let au = linalg::matvec(a_mat.as_ref(), &u);
        let r: f64 = (0..m)
            .map(|i| {
                let k1 = gen.k1(i);
                let lap = (k1 * k1 + block.k2 * block.k2) as f64;
                (u[i] * (lap - tau * tau) - au[i] * (c64::new(0.0, 2.0) * tau)).norm_sqr()
            })
            .sum::<f64>()
            .sqrt();
        residual = residual.max(r / (1.0 + tau.norm_sqr()));
        modes.push(WaveMode { k2: block.k2, tau, u });
    }
    Ok((modes, residual))
}

pub fn wave_spectrum(gen: &WaveGenerator) -> Result<WaveSpectrum> {
    use rayon::prelude::*;
    let parts: Vec<(Vec<WaveMode>, f64)> = gen
        .blocks
        .par_iter()
        .map(|b| block_spectrum(gen, b))
        .collect::<Result<_>>()?;
    let mut modes = Vec::new();
    let mut residual = 0.0f64;
    for (m, r) in parts {
        modes.extend(m);
        residual = residual.max(r);
    }
    Ok(WaveSpectrum {
        dim: gen.profile.dim,
        truncation: gen.k_max,
        modes,
        residual,
    })
}

/// Spectrum of the single block with the given `k₂`.
pub fn block_wave_spectrum(gen: &WaveGenerator, k2: i64) -> Result<WaveSpectrum> {
    let b = gen
        .block(k2)
        .ok_or_else(|| Error::WaveData(format!("no block with k2 = {k2}")))?;
    let (modes, residual) = block_spectrum(gen, b)?;
    Ok(WaveSpectrum {
        dim: gen.profile.dim,
        truncation: gen.k_max,
        modes,
        residual,
    })
}

/// Cauchy data `(u, w = i∂ₜu)` per block, laid out as `[u; w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveState {
    pub blocks: Vec<Vec<c64>>,
    pub regularity: f64,
}

impl WaveState {
    /// Gaussian coefficients with `u_k ∝ ⟨k⟩^{−1−s}` and `∂ₜu_k ∝ ⟨k⟩^{−s}`, so the
    /// energy spectrum decays like `⟨k⟩^{−2s}`.
    pub fn random(gen: &WaveGenerator, s: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gen.modes();
        let mut gauss = || -> c64 {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            c64::new(re, im)
        };
        let blocks = gen
            .blocks
            .iter()
            .map(|b| {
                let mut v = vec![c64::new(0.0, 0.0); 2 * m];
                for i in 0..m {
                    let k1 = gen.k1(i);
                    let br = (1.0 + (k1 * k1 + b.k2 * b.k2) as f64).sqrt();
                    v[i] = gauss() * br.powf(-1.0 - s);
                    v[m + i] = gauss() * br.powf(-s);
                }
                v
            })
            .collect();
        Self {
            blocks,
            regularity: s,
        }
    }

    /// Eigenmode data `(u, τu)` placed in its block.
    pub fn from_mode(gen: &WaveGenerator, mode: &WaveMode) -> Self {
        let m = gen.modes();
        let blocks = gen
            .blocks
            .iter()
            .map(|b| {
                let mut v = vec![c64::new(0.0, 0.0); 2 * m];
                if b.k2 == mode.k2 {
                    for i in 0..m {
                        v[i] = mode.u[i];
                        v[m + i] = mode.u[i] * mode.tau;
                    }
                }
                v
            })
            .collect();
        Self {
            blocks,
            regularity: f64::INFINITY,
        }
    }
}

/// `½ Σ (|k|²|u_k|² + |w_k|²)`.
pub fn energy(gen: &WaveGenerator, state: &WaveState) -> f64 {
    let m = gen.modes();
    let mut e = 0.0;
    for (b, v) in gen.blocks.iter().zip(&state.blocks) {
        for i in 0..m {
            let k1 = gen.k1(i);
            e += (k1 * k1 + b.k2 * b.k2) as f64 * v[i].norm_sqr() + v[m + i].norm_sqr();
        }
    }
    0.5 * e
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Eigen,
    Integrator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    pub data_regularity: f64,
    /// `Integrator` when some block had a defective eigenbasis.
    pub method: Method,
}

impl EnergyTrace {
    /// Columns `t,E`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,E\n");
        for (t, e) in self.times.iter().zip(&self.energies) {
            s.push_str(&format!("{t:.17e},{e:.17e}\n"));
        }
        s
    }
}

/// Smallest singular value of an eigenvector matrix accepted for eigen-expansion.
const DEFECT_TOL: f64 = 1e-8;

struct Expansion {
    vals: Vec<c64>,
    vecs: CMat,
    lu: faer::linalg::solvers::PartialPivLu<c64>,
}

fn expansion(mat: MatRef<'_, c64>) -> Result<Option<Expansion>> {
    let (vals, vecs) = spectra::eigen_full(mat)?;
    let sv = linalg::singular_values(vecs.as_ref())?;
    if sv.last().copied().unwrap_or(0.0) < DEFECT_TOL {
        return Ok(None);
    }
    let lu = vecs.partial_piv_lu();
    Ok(Some(Expansion { vals, vecs, lu }))
}

fn col(v: &[c64]) -> CMat {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

/// Energy along `t_grid` for data evolved by `e^{−it𝒜}`.
pub fn evolve(gen: &WaveGenerator, data: &WaveState, t_grid: &[f64]) -> Result<EnergyTrace> {
    evolve_with(gen, data, t_grid, Method::Eigen)
}

/// As [`evolve`], forcing the adaptive integrator when `method` is `Integrator`.
pub fn evolve_with(gen: &WaveGenerator, data: &WaveState, t_grid: &[f64], method: Method) -> Result<EnergyTrace> {
    if data.blocks.len() != gen.blocks.len() || data.blocks.iter().any(|b| b.len() != 2 * gen.modes()) {
        return Err(Error::WaveData("initial data does not match the truncation".into()));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::WaveData("time grid must be nonnegative and nondecreasing".into()));
    }
    let mut used = Method::Eigen;
    let mut states: Vec<WaveState> = t_grid
        .iter()
        .map(|_| WaveState {
            blocks: Vec::with_capacity(gen.blocks.len()),
            regularity: data.regularity,
        })
        .collect();
    for (b, x0) in gen.blocks.iter().zip(&data.blocks) {
        let exp = if method == Method::Eigen {
            expansion(b.mat.as_ref())?
        } else {
            None
        };
        let traj: Vec<Vec<c64>> = match exp {
            Some(e) => {
                let mut c = col(x0);
                e.lu.solve_in_place(c.as_mut());
                t_grid
                    .iter()
                    .map(|t| {
                        let ct: Vec<c64> = (0..c.nrows()).map(|i| c[(i, 0)] * (c64::new(0.0, -t) * e.vals[i]).exp()).collect();
                        linalg::matvec(e.vecs.as_ref(), &ct)
                    })
                    .collect()
            }
            None => {
                used = Method::Integrator;
                let a = b.mat.clone();
                dopri5(
                    |x| linalg::matvec(a.as_ref(), x).into_iter().map(|z| z * c64::new(0.0, -1.0)).collect(),
                    x0,
                    t_grid,
                    1e-10,
                    1e-13,
                )
            }
        };
        for (s, x) in states.iter_mut().zip(traj) {
            s.blocks.push(x);
        }
    }
    Ok(EnergyTrace {
        times: t_grid.to_vec(),
        energies: states.iter().map(|s| energy(gen, s)).collect(),
        data_regularity: data.regularity,
        method: used,
    })
}

/// Dormand–Prince 5(4) for `x' = f(x)`, reporting the state at each time in `t_grid`.
pub fn dopri5(
    f: impl Fn(&[c64]) -> Vec<c64>,
    x0: &[c64],
    t_grid: &[f64],
    rtol: f64,
    atol: f64,
) -> Vec<Vec<c64>> {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut t = 0.0f64;
    let mut h = 1e-3f64;
    let mut out = Vec::with_capacity(t_grid.len());
    for &target in t_grid {
        while t < target {
            let step = h.min(target - t);
            let mut k: Vec<Vec<c64>> = Vec::with_capacity(7);
            for a_s in &A {
                let xs: Vec<c64> = (0..n)
                    .map(|i| {
                        let mut z = x[i];
                        for (kj, a) in k.iter().zip(a_s) {
                            z += kj[i] * (step * a);
                        }
                        z
                    })
                    .collect();
                k.push(f(&xs));
            }
            let mut err = 0.0f64;
            let mut xn = vec![c64::new(0.0, 0.0); n];
            for i in 0..n {
                let mut z = x[i];
                let mut e = c64::new(0.0, 0.0);
                for s in 0..7 {
                    z += k[s][i] * (step * B[s]);
                    e += k[s][i] * (step * E[s]);
                }
                xn[i] = z;
                let sc = atol + rtol * x[i].norm().max(z.norm());
                err = err.max(e.norm() / sc);
            }
            if err <= 1.0 || step < 1e-12 {
                t += step;
                x = xn;
                if (target - t).abs() < 1e-14 {
                    t = target;
                }
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (step * fac).max(1e-12);
        }
        out.push(x.clone());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma_fit: f64,
    pub gamma_pred: f64,
    pub window: (f64, f64),
}

/// Relative energy floor below which samples are dropped from the fit.
pub const ENERGY_FLOOR: f64 = 1e-14;

/// `−½·slope` of `log E` after discarding the first 20% of the trace.
pub fn decay_fit(trace: &EnergyTrace, gap: f64, a_minus: f64) -> Result<DecayFit> {
    let n = trace.times.len();
    let e0 = trace.energies.first().copied().unwrap_or(0.0);
    let start = n / 5;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in start..n {
        let e = trace.energies[i];
        if e <= ENERGY_FLOOR * e0 || e <= 0.0 {
            break;
        }
        x.push(trace.times[i]);
        y.push(e.ln());
    }
    if x.len() < 3 {
        return Err(Error::WaveData("energy trace too short for a decay fit".into()));
    }
    let (slope, _) = spectra::least_squares(&x, &y);
    Ok(DecayFit {
        gamma_fit: -0.5 * slope,
        gamma_pred: gap.min(a_minus),
        window: (x[0], x[x.len() - 1]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GccReport {
    pub min_average: f64,
    pub a_minus_estimate: f64,
    pub gcc: bool,
    /// Direction angle and starting `x` of the least damped geodesic.
    pub worst: (f64, f64),
}

/// Threshold on `min ⟨a⟩_T` for declaring the geometric control condition.
pub const GCC_TOL: f64 = 1e-9;

/// Straight-line averages `⟨a⟩_T` over `directions` angles in `[0, π)` and
/// `offsets` starting abscissae. On the circle only the offsets matter.
pub fn gcc_scan(a: &DampingProfile, t: f64, directions: usize, offsets: usize) -> Result<GccReport> {
    if t < 1.0 {
        return Err(Error::WaveData(format!("geodesic length must be at least 1, got {t}")));
    }
    let angles: Vec<f64> = if a.dim == 1 {
        vec![0.0]
    } else {
        (0..directions.max(1)).map(|j| PI * j as f64 / directions.max(1) as f64).collect()
    };
    let samples = ((64.0 * t) as usize).max(1024);
    let mut best = (f64::INFINITY, (0.0, 0.0));
    for &phi in &angles {
        let vx = phi.cos() / (2.0 * PI);
        for i in 0..offsets.max(1) {
            let x0 = i as f64 / offsets.max(1) as f64;
            // composite Simpson on [0, T]
            let h = t / samples as f64;
            let mut s = 0.0;
            for k in 0..=samples {
                let w = if k == 0 || k == samples {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                s += w * a.eval(x0 + vx * k as f64 * h);
            }
            let avg = s * h / 3.0 / t;
            if avg < best.0 {
                best = (avg, (phi, x0));
            }
        }
    }
    Ok(GccReport {
        min_average: best.0,
        a_minus_estimate: best.0,
        gcc: best.0 > GCC_TOL,
        worst: best.1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KochTataru {
    pub restricted_norm: f64,
    pub bound: f64,
}

/// Energy weight of mode `k` for the displacement; 1 for the constant mode.
fn energy_weight(k1: i64, k2: i64) -> f64 {
    (((k1 * k1 + k2 * k2) as f64).sqrt()).max(1.0)
}

/// `e^{−it𝒜}` on one block in energy-orthonormal coordinates.
pub fn energy_propagator(gen: &WaveGenerator, block: &WaveBlock, t: f64) -> Result<CMat> {
    let m = gen.modes();
    let w: Vec<f64> = (0..2 * m)
        .map(|i| if i < m { energy_weight(gen.k1(i), block.k2) } else { 1.0 })
        .collect();
    let a = Mat::from_fn(2 * m, 2 * m, |i, j| block.mat[(i, j)] * (w[i] / w[j]));
    let prop = match expansion(a.as_ref())? {
        Some(e) => {
            let n = 2 * m;
            let d = Mat::from_fn(n, n, |i, j| e.vecs[(i, j)] * (c64::new(0.0, -t) * e.vals[j]).exp());
            // d·V^{-1} = (V^{-*} d*)*
            let mut x = d.adjoint().to_owned();
            e.lu.solve_adjoint_in_place(x.as_mut());
            x.adjoint().to_owned()
        }
        None => linalg::expm(linalg::scaled(a.as_ref(), c64::new(0.0, -t)).as_ref()),
    };
    Ok(prop)
}

/// Norm of `e^{−it𝒜}` on the energy space with the `codim` lowest Fourier modes
/// (both Cauchy components) removed, against `exp(−t·min ⟨a⟩_t)`.
pub fn koch_tataru_check(gen: &WaveGenerator, t: f64, codim: usize) -> Result<KochTataru> {
    let m = gen.modes();
    let mut all: Vec<(i64, i64, usize, usize)> = Vec::new();
    for (bi, b) in gen.blocks.iter().enumerate() {
        for i in 0..m {
            let k1 = gen.k1(i);
            all.push((k1 * k1 + b.k2 * b.k2, k1.abs().max(b.k2.abs()), bi, i));
        }
    }
    all.sort();
    let removed: std::collections::HashSet<(usize, usize)> = all.iter().take(codim).map(|e| (e.2, e.3)).collect();
    let mut norm = 0.0f64;
    for (bi, b) in gen.blocks.iter().enumerate() {
        let keep: Vec<usize> = (0..m).filter(|i| !removed.contains(&(bi, *i))).collect();
        if keep.is_empty() {
            continue;
        }
        let p = energy_propagator(gen, b, t)?;
        let cols: Vec<usize> = keep.iter().copied().chain(keep.iter().map(|i| i + m)).collect();
        let sub = Mat::from_fn(2 * m, cols.len(), |i, j| p[(i, cols[j])]);
        norm = norm.max(linalg::spectral_norm(sub.as_ref())?);
    }
    let g = gcc_scan(&gen.profile, t.max(1.0), 64, 64)?;
    Ok(KochTataru {
        restricted_norm: norm,
        bound: (-t * g.min_average).exp(),
    })
}

/// Fraction of the mode's Fourier mass with `|k| ∉ [|Re τ|(1−δ), |Re τ|(1+δ)]`.
pub fn microlocal_check(spec: &WaveSpectrum, n: usize, delta: f64) -> Result<f64> {
    let mode = spec
        .modes
        .get(n)
        .ok_or_else(|| Error::WaveData(format!("mode index {n} out of range")))?;
    let r = mode.tau.re.abs();
    let kk = spec.truncation as i64;
    let total: f64 = mode.u.iter().map(|z| z.norm_sqr()).sum();
    let outside: f64 = mode
        .u
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let k1 = *i as i64 - kk;
            let k = ((k1 * k1 + mode.k2 * mode.k2) as f64).sqrt();
            k < r * (1.0 - delta) || k > r * (1.0 + delta)
        })
        .map(|(_, z)| z.norm_sqr())
        .sum();
    Ok(outside / total)
}

/// `z = (ħτ)²/2`.
pub fn rescale(tau: c64, hbar: f64) -> c64 {
    let s = tau * hbar;
    s * s * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undamped_circle_spectrum_is_integer() {
        let g = assemble_generator(&DampingProfile::undamped(1).unwrap(), 8).unwrap();
        let s = wave_spectrum(&g).unwrap();
        let mut re: Vec<f64> = s.taus().iter().map(|t| t.re).collect();
        re.sort_by(|a, b| a.total_cmp(b));
        for k in 1..=8 {
            let c = re.iter().filter(|r| (**r - k as f64).abs() < 1e-8).count();
            assert_eq!(c, 2, "k = {k}");
        }
        assert!(s.taus().iter().all(|t| t.im.abs() < 1e-7));
    }

    #[test]
    fn block_structure() {
        let a = DampingProfile::cosine(1, 0.4, 0.4).unwrap();
        let g = assemble_generator(&a, 6).unwrap();
        let m = g.modes();
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(g.blocks[0].mat[(i, m + j)], c64::new(want, 0.0));
            }
        }
        assert!(assemble_generator(&a, 3).is_err());
    }

    #[test]
    fn profile_validation() {
        assert!(DampingProfile::cosine(1, 0.1, 0.4).is_err());
        assert!(DampingProfile::constant(1, 0.0).is_err());
        assert_eq!(DampingProfile::undamped(2).unwrap().a_max(), 0.0);
        let s = DampingProfile::strip(2, 0.4, 0.6, 0.1, 1.0).unwrap();
        assert_eq!(s.eval(0.5), 0.0);
        assert_eq!(s.eval(0.0), 1.0);
        assert!((s.eval(0.35) - 0.5).abs() < 1e-12);
        let json = serde_json::to_string(&s).unwrap();
        let back: DampingProfile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn gcc_examples() {
        let c = DampingProfile::cosine(1, 0.4, 0.4).unwrap();
        let r = gcc_scan(&c, 2.0 * PI * 5.0, 1, 16).unwrap();
        assert!(r.gcc);
        assert!((r.a_minus_estimate - 0.4).abs() < 1e-9);
        let s = DampingProfile::strip(2, 0.4, 0.6, 0.1, 1.0).unwrap();
        let r = gcc_scan(&s, 50.0, 16, 16).unwrap();
        assert!(!r.gcc);
        assert_eq!(r.min_average, 0.0);
    }

    #[test]
    fn rescale_examples() {
        let h = 0.01;
        assert_eq!(rescale(c64::new(1.0 / h, 0.0), h), c64::new(0.5, 0.0));
        let c = 0.3;
        let z = rescale(c64::new(1.0 / h, -c), h);
        assert!((z.im / h + c).abs() <= 2.0 * c * c * h);
    }

    #[test]
    fn integrator_matches_eigen_expansion() {
        let a = DampingProfile::cosine(1, 0.4, 0.4).unwrap();
        let g = assemble_generator(&a, 6).unwrap();
        let d = WaveState::random(&g, 0.0, 3);
        let ts: Vec<f64> = (0..6).map(|i| i as f64 * 0.7).collect();
        let e1 = evolve_with(&g, &d, &ts, Method::Eigen).unwrap();
        let e2 = evolve_with(&g, &d, &ts, Method::Integrator).unwrap();
        assert_eq!(e1.method, Method::Eigen);
        for (x, y) in e1.energies.iter().zip(&e2.energies) {
            assert!((x - y).abs() < 1e-7 * x, "{x} vs {y}");
        }
    }
}
