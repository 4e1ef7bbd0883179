//! Non-Hermitian spectral analysis of damped propagators and wave generators.

use faer::linalg::solvers::Solve;
use faer::{c64, Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::qtorus::DampedPropagator;
use crate::thermo::RateFunctionTable;

/// Largest matrix accepted by the dense eigensolver.
pub const DENSE_CAP: usize = 4096;
pub const DEFAULT_BAND_EPS: f64 = 0.1;
pub const HISTOGRAM_BINS: usize = 64;
pub const MIN_REGRESSION_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    /// Damped quantum map on `C^N`.
    Qmap { n: usize },
    /// Wave generator on the `dim`-torus truncated at `|k| ≤ k_max`.
    Wave { dim: usize, k_max: usize },
    Matrix { n: usize },
}

impl Source {
    pub fn n(&self) -> usize {
        match self {
            Source::Qmap { n } | Source::Matrix { n } => *n,
            Source::Wave { k_max, .. } => *k_max,
        }
    }
}

/// `(re, im)` pairs on the wire.
pub mod complex_vec {
    use faer::c64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[c64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<c64>, D::Error> {
        Ok(Vec::<[f64; 2]>::deserialize(d)?
            .into_iter()
            .map(|[re, im]| c64::new(re, im))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub source: Source,
    #[serde(with = "complex_vec")]
    pub eigenvalues: Vec<c64>,
    /// Sorted descending, aligned with `eigenvalues`.
    pub decay_rates: Vec<f64>,
    pub residual: f64,
}

impl SpectrumRecord {
    /// Record with rates from `rate(λ)`, reordered by decreasing rate.
    pub fn from_values(source: Source, values: Vec<c64>, residual: f64, rate: impl Fn(c64) -> f64) -> Self {
        let mut pairs: Vec<(f64, c64)> = values.into_iter().map(|z| (rate(z), z)).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.re.total_cmp(&b.1.re)).then(a.1.im.total_cmp(&b.1.im)));
        Self {
            source,
            decay_rates: pairs.iter().map(|p| p.0).collect(),
            eigenvalues: pairs.iter().map(|p| p.1).collect(),
            residual,
        }
    }

    pub fn n(&self) -> usize {
        self.source.n()
    }

    pub fn max_rate(&self) -> f64 {
        self.decay_rates.first().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Columns `re,im,modulus,decay_rate`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("re,im,modulus,decay_rate\n");
        for (z, g) in self.eigenvalues.iter().zip(&self.decay_rates) {
            s.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e}\n", z.re, z.im, z.norm(), g));
        }
        s
    }
}

/// Eigenvalues and unit-norm eigenvectors (as columns).
pub fn eigen_full(op: MatRef<'_, c64>) -> Result<(Vec<c64>, CMat)> {
    let n = op.nrows();
    if n > DENSE_CAP {
        return Err(Error::DenseCap { n, cap: DENSE_CAP });
    }
    let evd = op.eigen().map_err(|_| Error::Eigensolver {
        hash: linalg::matrix_hash(op),
    })?;
    let s = evd.S().column_vector();
    let values: Vec<c64> = (0..n).map(|i| s[i]).collect();
    let u = evd.U();
    let mut vecs = u.to_owned();
    for j in 0..n {
        let nrm = (0..n).map(|i| u[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        if nrm > 0.0 {
            for i in 0..n {
                vecs[(i, j)] = u[(i, j)] * (1.0 / nrm);
            }
        }
    }
    if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Eigensolver {
            hash: linalg::matrix_hash(op),
        });
    }
    Ok((values, vecs))
}

/// `max_k ‖A x_k − λ_k x_k‖` for unit eigenvectors.
pub fn eigen_residual(op: MatRef<'_, c64>, values: &[c64], vecs: MatRef<'_, c64>) -> f64 {
    let av = op * vecs;
    let n = vecs.nrows();
    (0..values.len())
        .map(|j| {
            (0..n)
                .map(|i| (av[(i, j)] - vecs[(i, j)] * values[j]).norm_sqr())
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Full spectrum of a map propagator with `γ_k = log|λ_k|`.
pub fn eigendecompose(op: MatRef<'_, c64>) -> Result<SpectrumRecord> {
    eigendecompose_as(op, Source::Matrix { n: op.nrows() })
}

pub fn eigendecompose_as(op: MatRef<'_, c64>, source: Source) -> Result<SpectrumRecord> {
    let (values, vecs) = eigen_full(op)?;
    let residual = eigen_residual(op, &values, vecs.as_ref());
    Ok(SpectrumRecord::from_values(source, values, residual, |z| z.norm().ln()))
}

/// Spectrum of a damped propagator.
pub fn propagator_spectrum(dp: &DampedPropagator) -> Result<SpectrumRecord> {
    eigendecompose_as(dp.v.as_ref(), Source::Qmap { n: dp.n() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub violations: usize,
    pub gap: f64,
}

pub fn band_check(rec: &SpectrumRecord, q_minus: f64, q_plus: f64, eps: f64) -> BandReport {
    let violations = rec
        .decay_rates
        .iter()
        .filter(|g| **g < q_minus - eps || **g > q_plus + eps)
        .count();
    BandReport {
        violations,
        gap: q_plus - rec.max_rate(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub fractions: Vec<(usize, f64)>,
    /// Fractions never decrease along the `N` ladder.
    pub monotone: bool,
    pub histograms: Vec<Histogram>,
}

pub fn concentration_histogram(records: &[SpectrumRecord], q_bar: f64, eps: f64) -> ConcentrationReport {
    let mut fractions = Vec::new();
    let mut histograms = Vec::new();
    for r in records {
        let total = r.decay_rates.len().max(1);
        let inside = r.decay_rates.iter().filter(|g| (**g - q_bar).abs() <= eps).count();
        fractions.push((r.n(), inside as f64 / total as f64));
        let finite: Vec<f64> = r.decay_rates.iter().copied().filter(|g| g.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0usize; HISTOGRAM_BINS];
        if !finite.is_empty() {
            let width = (hi - lo).max(1e-300);
            for g in &finite {
                let b = (((g - lo) / width) * HISTOGRAM_BINS as f64) as usize;
                counts[b.min(HISTOGRAM_BINS - 1)] += 1;
            }
        }
        histograms.push(Histogram { n: r.n(), lo, hi, counts });
    }
    let monotone = fractions.windows(2).all(|w| w[1].1 >= w[0].1);
    ConcentrationReport {
        fractions,
        monotone,
        histograms,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub alpha: f64,
    pub counts: Vec<(usize, usize)>,
    pub slope: f64,
    pub slope_bound: f64,
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Counts `#{γ_k ≥ α}` and their log-log slope in `N`.
pub fn fractal_weyl_regression(
    records: &[SpectrumRecord],
    alpha: f64,
    h_table: &RateFunctionTable,
    lambda_max: f64,
) -> Result<CountReport> {
    let mut ns: Vec<usize> = records.iter().map(|r| r.n()).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < MIN_REGRESSION_POINTS || ns[ns.len() - 1] < 8 * ns[0] {
        return Err(Error::Regression(format!(
            "need at least {MIN_REGRESSION_POINTS} distinct N spanning a factor 8, got {ns:?}"
        )));
    }
    let counts: Vec<(usize, usize)> = records
        .iter()
        .map(|r| (r.n(), r.decay_rates.iter().filter(|g| **g >= alpha).count()))
        .collect();
    if counts.iter().all(|c| c.1 == 0) {
        return Err(Error::Regression("level above spectrum".into()));
    }
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .filter(|c| c.1 > 0)
        .map(|c| ((c.0 as f64).ln(), (c.1 as f64).ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        least_squares(&x, &y).0
    } else {
        f64::NEG_INFINITY
    };
    let h = h_table.eval(alpha);
    let slope_bound = if h.is_finite() { 1.0 + h / lambda_max } else { f64::NEG_INFINITY };
    Ok(CountReport {
        alpha,
        counts,
        slope,
        slope_bound,
    })
}

const RESOLVENT_ITERS: usize = 500;
const RESOLVENT_TOL: f64 = 1e-13;

/// `‖(A − z)^{-1}‖₂`, or `+∞` when `A − z` is singular to machine precision.
/// Power iteration on `(A − z)^{-*}(A − z)^{-1}` through one LU factorization.
pub fn resolvent_norm(op: MatRef<'_, c64>, z: c64) -> f64 {
    let n = op.nrows();
    if n == 0 {
        return 0.0;
    }
    let shifted = Mat::from_fn(n, n, |i, j| if i == j { op[(i, j)] - z } else { op[(i, j)] });
    let scale = linalg::frobenius(shifted.as_ref());
    if scale == 0.0 {
        return f64::INFINITY;
    }
    let lu = shifted.partial_piv_lu();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = Mat::from_fn(n, 1, |_, _| c64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    let nx = x.norm_l2();
    x = linalg::scaled(x.as_ref(), c64::new(1.0 / nx, 0.0));
    let mut est = 0.0f64;
    let cutoff = 1.0 / (f64::EPSILON * scale);
    for _ in 0..RESOLVENT_ITERS {
        let mut y = x.clone();
        lu.solve_in_place(y.as_mut());
        let ny = y.norm_l2();
        if !ny.is_finite() || ny > cutoff {
            return f64::INFINITY;
        }
        lu.solve_adjoint_in_place(y.as_mut());
        let nw = y.norm_l2();
        if !nw.is_finite() {
            return f64::INFINITY;
        }
        // ‖A^{-1}x‖ with ‖x‖ = 1 is a lower bound that increases to the norm
        let prev = est;
        est = est.max(ny);
        x = linalg::scaled(y.as_ref(), c64::new(1.0 / nw, 0.0));
        if (est - prev).abs() <= RESOLVENT_TOL * est && prev > 0.0 {
            break;
        }
    }
    if est > cutoff {
        f64::INFINITY
    } else {
        est
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormScanRow {
    pub t: usize,
    pub norm: f64,
    /// `e^{(q₊+ε)t}`
    pub short_bound: f64,
    /// `e^{t(P(q−φ⁺/2)+ε)}`
    pub pressure_bound: f64,
}

/// `‖V^t‖₂` for each `t`, against the short-time and pressure bounds.
pub fn propagator_norm_scan(
    dp: &DampedPropagator,
    t_list: &[usize],
    q_plus: f64,
    pressure_half: f64,
    eps: f64,
) -> Result<Vec<NormScanRow>> {
    let mut ts: Vec<usize> = t_list.to_vec();
    ts.sort_unstable();
    ts.dedup();
    let mut rows = Vec::new();
    let mut cur = linalg::identity(dp.n());
    let mut at = 0usize;
    for t in ts {
        if t > at {
            let step = linalg::power(dp.v.as_ref(), t - at);
            cur = &step * &cur;
            at = t;
        }
        let norm = linalg::spectral_norm(cur.as_ref())?;
        rows.push(NormScanRow {
            t,
            norm,
            short_bound: ((q_plus + eps) * t as f64).exp(),
            pressure_bound: ((pressure_half + eps) * t as f64).exp(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeylCount {
    pub count: usize,
    pub prediction: f64,
}

/// Frequencies `τ` with `Re τ ∈ [lo, hi]` against the lattice phase volume
/// `2(hi − lo)` on the circle and `π(hi² − lo²)` on the 2-torus.
pub fn weyl_count(rec: &SpectrumRecord, window: (f64, f64)) -> Result<WeylCount> {
    let dim = match rec.source {
        Source::Wave { dim, .. } => dim,
        _ => return Err(Error::WaveData("Weyl count needs a wave spectrum".into())),
    };
    let (lo, hi) = window;
    let count = rec.eigenvalues.iter().filter(|t| t.re >= lo && t.re <= hi).count();
    let prediction = match dim {
        1 => 2.0 * (hi - lo),
        _ => std::f64::consts::PI * (hi * hi - lo * lo),
    };
    Ok(WeylCount { count, prediction })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(d: &[c64]) -> CMat {
        Mat::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { c64::new(0.0, 0.0) })
    }

    #[test]
    fn identity_and_diagonal_spectra() {
        let r = eigendecompose(linalg::identity(7).as_ref()).unwrap();
        assert!(r.eigenvalues.iter().all(|z| *z == c64::new(1.0, 0.0)));
        assert!(r.residual < 1e-14);
        let d = [c64::new(0.5, 0.1), c64::new(-2.0, 0.0), c64::new(0.0, 0.3)];
        let r = eigendecompose(diag(&d).as_ref()).unwrap();
        for z in d {
            assert!(r.eigenvalues.contains(&z));
        }
        assert!(r.decay_rates.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn band_check_constant_cases() {
        let r = eigendecompose(linalg::identity(4).as_ref()).unwrap();
        let b = band_check(&r, 0.0, 0.0, 1e-3);
        assert_eq!(b.violations, 0);
        assert_eq!(b.gap, 0.0);
    }

    #[test]
    fn resolvent_of_normal_matrix_is_inverse_distance() {
        let d: Vec<c64> = (0..20).map(|k| c64::new((k as f64 * 0.7).cos(), (k as f64 * 1.3).sin())).collect();
        let a = diag(&d);
        let z = c64::new(0.1, -0.05);
        let dist = d.iter().map(|l| (l - z).norm()).fold(f64::INFINITY, f64::min);
        let r = resolvent_norm(a.as_ref(), z);
        assert!((r * dist - 1.0).abs() < 1e-10, "{r} vs {}", 1.0 / dist);
        assert_eq!(resolvent_norm(a.as_ref(), d[3]), f64::INFINITY);
    }

    #[test]
    fn csv_has_one_row_per_eigenvalue() {
        let r = eigendecompose(linalg::identity(3).as_ref()).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("re,im,modulus,decay_rate"));
        let json = serde_json::to_string(&r).unwrap();
        let back: SpectrumRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
