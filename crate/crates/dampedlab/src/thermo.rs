//! Topological pressure from periodic-orbit sums, the large-deviation rate
//! function by Legendre duality, and the classical gap conditions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{self, Observable, PeriodicOrbit, TorusMap, ORBIT_CAP};
use crate::error::{Error, Result};

/// Periods used for the orbit sums.
pub const DEFAULT_N_RANGE: (usize, usize) = (6, 14);

/// Rate-function values below this are reported as `-inf`.
pub const H_FLOOR: f64 = -50.0;

/// `f = beta·q + phi_coeff·φ⁺ + constant`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub q: Observable,
    pub beta: f64,
    pub phi_coeff: f64,
    pub constant: f64,
}

impl Potential {
    pub fn new(q: Observable, beta: f64, phi_coeff: f64, constant: f64) -> Self {
        Self {
            q,
            beta,
            phi_coeff,
            constant,
        }
    }

    pub fn phi(phi_coeff: f64) -> Self {
        Self::new(Observable::zero(), 0.0, phi_coeff, 0.0)
    }

    pub fn describe(&self) -> String {
        format!(
            "{}*q + {}*phi_plus + {} with q = {}",
            self.beta,
            self.phi_coeff,
            self.constant,
            serde_json::to_string(&self.q).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureEstimate {
    pub f_desc: String,
    pub n_range: (usize, usize),
    pub partial: Vec<(usize, f64)>,
    pub value: f64,
    pub error_est: f64,
}

#[derive(Clone, Debug)]
struct Level {
    n: usize,
    // per orbit: number of points (= its period) and the n-step Birkhoff sum of q
    weights: Vec<f64>,
    sums: Vec<f64>,
}

fn log_sum_exp(weights: &[f64], exps: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = exps.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = weights.iter().zip(exps).map(|(w, e)| w * (e - m).exp()).sum();
    m + s.ln()
}

/// Periodic-orbit data of a linear map for one observable, reusable across potentials.
#[derive(Clone, Debug)]
pub struct PressureModel {
    map: TorusMap,
    q: Observable,
    log_lambda: f64,
    n_range: (usize, usize),
    levels: Vec<Level>,
    // (orbit average, orbit) for every primitive orbit seen
    orbit_avgs: Vec<(f64, PeriodicOrbit)>,
}

impl PressureModel {
    pub fn new(map: &TorusMap, q: &Observable, n_range: (usize, usize)) -> Result<Self> {
        if !map.is_linear() {
            return Err(Error::LinearOnly);
        }
        let (lo, hi) = n_range;
        if lo < 2 || hi <= lo {
            return Err(Error::Empty("pressure n range (need 2 <= n_min < n_max)"));
        }
        if hi > ORBIT_CAP {
            return Err(Error::OrbitCap { n: hi, cap: ORBIT_CAP });
        }
        let per_n: Vec<(Level, Vec<(f64, PeriodicOrbit)>)> = (lo..=hi)
            .into_par_iter()
            .map(|n| -> Result<_> {
                let orbits = classical::periodic_orbits(map, n, ORBIT_CAP)?;
                let mut weights = Vec::with_capacity(orbits.len());
                let mut sums = Vec::with_capacity(orbits.len());
                let mut avgs = Vec::new();
                for o in orbits {
                    let avg = classical::orbit_average(map, &o, q);
                    weights.push(o.period as f64);
                    sums.push(avg * n as f64);
                    if o.period == n || n == hi {
                        avgs.push((avg, o));
                    }
                }
                Ok((Level { n, weights, sums }, avgs))
            })
            .collect::<Result<_>>()?;
        let mut levels = Vec::new();
        let mut orbit_avgs = Vec::new();
        for (l, a) in per_n {
            levels.push(l);
            orbit_avgs.extend(a);
        }
        Ok(Self {
            map: map.clone(),
            q: q.clone(),
            log_lambda: map.lambda().ln(),
            n_range,
            levels,
            orbit_avgs,
        })
    }

    pub fn map(&self) -> &TorusMap {
        &self.map
    }

    pub fn q(&self) -> &Observable {
        &self.q
    }

    pub fn log_lambda(&self) -> f64 {
        self.log_lambda
    }

    fn log_z(&self, level: &Level, beta: f64, phi_coeff: f64, constant: f64) -> f64 {
        let shift = level.n as f64 * (phi_coeff * self.log_lambda + constant);
        log_sum_exp(&level.weights, level.sums.iter().map(move |s| beta * s + shift))
    }

    /// Pressure of `beta·q + phi_coeff·φ⁺ + constant`.
    pub fn pressure(&self, beta: f64, phi_coeff: f64, constant: f64) -> PressureEstimate {
        let logs: Vec<f64> = self
            .levels
            .iter()
            .map(|l| self.log_z(l, beta, phi_coeff, constant))
            .collect();
        let partial: Vec<(usize, f64)> = self
            .levels
            .iter()
            .zip(&logs)
            .map(|(l, z)| (l.n, z / l.n as f64))
            .collect();
        let k = logs.len();
        // Richardson in 1/n: n·v(n) − (n−1)·v(n−1) = log Z_n − log Z_{n−1}
        let r_last = logs[k - 1] - logs[k - 2];
        let r_prev = if k >= 3 { logs[k - 2] - logs[k - 3] } else { r_last };
        let last_partial = partial[k - 1].1;
        let error_est = (r_last - r_prev).abs().max((r_last - last_partial).abs());
        PressureEstimate {
            f_desc: Potential::new(self.q.clone(), beta, phi_coeff, constant).describe(),
            n_range: self.n_range,
            partial,
            value: r_last,
            error_est,
        }
    }

    /// `P(βq − φ⁺)`.
    pub fn p_beta(&self, beta: f64) -> f64 {
        self.pressure(beta, -1.0, 0.0).value
    }

    /// `d/dβ P(βq − φ⁺)` from the Gibbs averages of the two largest periods.
    pub fn slope(&self, beta: f64) -> f64 {
        let k = self.levels.len();
        let mean = |l: &Level| {
            let ex: Vec<f64> = l.sums.iter().map(|s| beta * s).collect();
            let m = ex.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut num = 0.0;
            let mut den = 0.0;
            for ((w, s), e) in l.weights.iter().zip(&l.sums).zip(&ex) {
                let g = w * (e - m).exp();
                num += g * s;
                den += g;
            }
            num / den
        };
        mean(&self.levels[k - 1]) - mean(&self.levels[k - 2])
    }

    /// Extreme periodic-orbit averages `(q₋, q₊)` with the orbits attaining them.
    pub fn orbit_extremes(&self) -> (f64, f64, Vec<PeriodicOrbit>, Vec<PeriodicOrbit>) {
        if self.q.is_constant() {
            let c = self.q.mean();
            let o = self.orbit_avgs[0].1.clone();
            return (c, c, vec![o.clone()], vec![o]);
        }
        let lo = self.orbit_avgs.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        let hi = self.orbit_avgs.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-10 * (1.0 + hi.abs().max(lo.abs()));
        let pick = |v: f64| -> Vec<PeriodicOrbit> {
            let mut out: Vec<PeriodicOrbit> = self
                .orbit_avgs
                .iter()
                .filter(|a| (a.0 - v).abs() <= tol)
                .map(|a| a.1.clone())
                .collect();
            out.sort_by_key(|o| o.period);
            out.dedup_by(|a, b| a.period == b.period && a.point == b.point);
            out
        };
        (lo, hi, pick(lo), pick(hi))
    }

    /// `H̃(s) = inf_β [P(βq − φ⁺) − βs]` with the infimum refined by golden section.
    pub fn legendre_inf(&self, beta_grid: &[f64], s: f64) -> f64 {
        let vals: Vec<f64> = beta_grid.iter().map(|b| self.p_beta(*b) - b * s).collect();
        self.legendre_inf_with(beta_grid, &vals, s)
    }

    fn legendre_inf_with(&self, beta_grid: &[f64], p_vals: &[f64], s: f64) -> f64 {
        let g: Vec<f64> = beta_grid.iter().zip(p_vals).map(|(b, p)| p - b * s).collect();
        let (imin, gmin) = g
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
        if beta_grid.len() < 3 || imin == 0 || imin + 1 == beta_grid.len() {
            return gmin;
        }
        let f = |b: f64| self.p_beta(b) - b * s;
        let (mut a, mut c) = (beta_grid[imin - 1], beta_grid[imin + 1]);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = c - r * (c - a);
        let mut x2 = a + r * (c - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..60 {
            if f1 < f2 {
                c = x2;
                x2 = x1;
                f2 = f1;
                x1 = c - r * (c - a);
                f1 = f(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + r * (c - a);
                f2 = f(x2);
            }
            if (c - a).abs() < 1e-9 {
                break;
            }
        }
        gmin.min(f1).min(f2)
    }

    pub fn rate_function(&self, beta_grid: &[f64], s_grid: &[f64]) -> Result<RateFunctionTable> {
        if beta_grid.is_empty() {
            return Err(Error::Empty("beta grid"));
        }
        let (q_minus, q_plus, k_minus, k_plus) = self.orbit_extremes();
        let q_bar = self.q.mean();
        let p_vals: Vec<f64> = beta_grid.par_iter().map(|b| self.p_beta(*b)).collect();
        let h_plus = pressure_on_orbit_set(&self.map, &k_plus, &Potential::phi(-1.0))?;
        let h_minus = pressure_on_orbit_set(&self.map, &k_minus, &Potential::phi(-1.0))?;
        let tol = 1e-12 * (1.0 + q_plus.abs().max(q_minus.abs()));
        let mut h: Vec<f64> = s_grid
            .par_iter()
            .map(|&s| {
                if s < q_minus - tol || s > q_plus + tol {
                    f64::NEG_INFINITY
                } else if q_plus - q_minus <= tol {
                    0.0
                } else if (s - q_plus).abs() <= tol {
                    h_plus
                } else if (s - q_minus).abs() <= tol {
                    h_minus
                } else {
                    self.legendre_inf_with(beta_grid, &p_vals, s).min(0.0)
                }
            })
            .collect();
        for v in h.iter_mut() {
            if *v < H_FLOOR {
                *v = f64::NEG_INFINITY;
            }
        }
        let mut table = RateFunctionTable {
            s_grid: s_grid.to_vec(),
            h,
            domain: (q_minus, q_plus),
            q_bar,
            concavity_warning: None,
        };
        table.concavity_warning = table.check_concavity(1e-6);
        Ok(table)
    }

    /// Uniform points on `[q₋, q₊]`, the slopes `P'(β)` of the β grid, and `q̄`.
    pub fn default_s_grid(&self, beta_grid: &[f64], uniform: usize) -> Vec<f64> {
        let (lo, hi, _, _) = self.orbit_extremes();
        let mut s: Vec<f64> = Vec::new();
        if hi - lo > 0.0 {
            for i in 0..uniform.max(2) {
                s.push(lo + (hi - lo) * i as f64 / (uniform.max(2) - 1) as f64);
            }
            for b in beta_grid {
                let v = self.slope(*b);
                if v > lo && v < hi {
                    s.push(v);
                }
            }
        }
        s.push(self.q.mean());
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
        s
    }
}

/// `[-20, 20]` in 101 points.
pub fn default_beta_grid() -> Vec<f64> {
    (0..101).map(|i| -20.0 + 0.4 * i as f64).collect()
}

/// Pressure of `f` from orbit sums over `Fix(Φⁿ)`, `n ∈ n_range`.
pub fn pressure(map: &TorusMap, f: &Potential, n_range: (usize, usize)) -> Result<PressureEstimate> {
    let model = PressureModel::new(map, &f.q, n_range)?;
    Ok(model.pressure(f.beta, f.phi_coeff, f.constant))
}

/// Maximum over the given closed orbits of the orbit average of `f`.
pub fn pressure_on_orbit_set(map: &TorusMap, orbits: &[PeriodicOrbit], f: &Potential) -> Result<f64> {
    if orbits.is_empty() {
        return Err(Error::Empty("orbit set"));
    }
    let hyp = classical::hyperbolicity(map, 1, 1)?;
    let mut best = f64::NEG_INFINITY;
    for o in orbits {
        let pts = o.points(map);
        let mut s = 0.0;
        for r in &pts {
            let phi = if f.phi_coeff != 0.0 { hyp.phi_plus(*r)? } else { 0.0 };
            s += f.beta * f.q.eval(*r) + f.phi_coeff * phi + f.constant;
        }
        best = best.max(s / pts.len() as f64);
    }
    Ok(best)
}

/// Sampled large-deviation rate function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFunctionTable {
    pub s_grid: Vec<f64>,
    #[serde(with = "neg_inf_sentinel")]
    pub h: Vec<f64>,
    pub domain: (f64, f64),
    pub q_bar: f64,
    pub concavity_warning: Option<String>,
}

impl RateFunctionTable {
    fn check_concavity(&self, tol: f64) -> Option<String> {
        let pts: Vec<(f64, f64)> = self
            .s_grid
            .iter()
            .zip(&self.h)
            .filter(|(_, h)| h.is_finite())
            .map(|(s, h)| (*s, *h))
            .collect();
        for w in pts.windows(3) {
            let (s0, h0) = w[0];
            let (s1, h1) = w[1];
            let (s2, h2) = w[2];
            if s1 - s0 <= 0.0 || s2 - s1 <= 0.0 {
                continue;
            }
            let left = (h1 - h0) / (s1 - s0);
            let right = (h2 - h1) / (s2 - s1);
            if right > left + tol * (1.0 + left.abs()) / (s2 - s0).min(1.0) {
                return Some(format!("rate function not concave near s = {s1:.6}"));
            }
        }
        None
    }

    /// Columns `s,H`; unreachable levels are written as `-inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,H\n");
        for (s, h) in self.s_grid.iter().zip(&self.h) {
            if *h == f64::NEG_INFINITY {
                out.push_str(&format!("{s},-inf\n"));
            } else {
                out.push_str(&format!("{s},{h}\n"));
            }
        }
        out
    }

    /// Linear interpolation of `H̃` (returns `-inf` outside the domain).
    pub fn eval(&self, s: f64) -> f64 {
        let (lo, hi) = self.domain;
        if s < lo - 1e-12 || s > hi + 1e-12 {
            return f64::NEG_INFINITY;
        }
        let pts: Vec<(f64, f64)> = self
            .s_grid
            .iter()
            .zip(&self.h)
            .filter(|(_, h)| h.is_finite())
            .map(|(s, h)| (*s, *h))
            .collect();
        if pts.is_empty() {
            return f64::NEG_INFINITY;
        }
        if s <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            if s <= w[1].0 {
                let t = (s - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        pts[pts.len() - 1].1
    }

    /// `sup_s [H̃(s) + βs]` over the finite table entries.
    pub fn legendre(&self, beta: f64) -> f64 {
        self.s_grid
            .iter()
            .zip(&self.h)
            .filter(|(_, h)| h.is_finite())
            .map(|(s, h)| h + beta * s)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Serializes `-inf` entries as the string `"-inf"`.
pub mod neg_inf_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let e: Vec<Entry> = v
            .iter()
            .map(|x| {
                if *x == f64::NEG_INFINITY {
                    Entry::Tag("-inf".into())
                } else {
                    Entry::Num(*x)
                }
            })
            .collect();
        e.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        use serde::de::Error;
        Vec::<Entry>::deserialize(d)?
            .into_iter()
            .map(|e| match e {
                Entry::Num(x) => Ok(x),
                Entry::Tag(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
                Entry::Tag(t) => Err(D::Error::custom(format!("unexpected entry {t:?}"))),
            })
            .collect()
    }
}

/// Sampled `H̃` on `s_grid` from orbit sums over the default period range.
pub fn rate_function(map: &TorusMap, q: &Observable, beta_grid: &[f64], s_grid: &[f64]) -> Result<RateFunctionTable> {
    PressureModel::new(map, q, DEFAULT_N_RANGE)?.rate_function(beta_grid, s_grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Condition {
    fn less(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs < rhs,
        }
    }

    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `P(q − φ⁺/2) < q₊`
    pub pressure_cond: Condition,
    /// `P(−φ⁺, Φ|K) < ν_min/2 − λ_max`
    pub thickness_cond: Condition,
    /// `h_top(K) < λ_max/2`, written as `lhs = h_top(K)`, `rhs = threshold`
    pub constcurv_cond: Condition,
    /// `P(−φ⁺/2, Φ|K) < 0`
    pub conjecture_cond: Condition,
    pub q_plus: f64,
    pub q_bar: f64,
    /// `(α, β(α))` for α in `(q̄, q₊)`
    pub beta_alpha: Vec<(f64, f64)>,
}

/// `β(α) = ν_min/2 − λ_max − H̃(α)`.
pub fn beta_of_alpha(nu_min: f64, lambda_max: f64, h_alpha: f64) -> f64 {
    nu_min / 2.0 - lambda_max - h_alpha
}

pub fn gap_report(map: &TorusMap, q: &Observable, k_orbits: &[PeriodicOrbit]) -> Result<GapReport> {
    let model = PressureModel::new(map, q, DEFAULT_N_RANGE)?;
    gap_report_with(&model, k_orbits, 33)
}

pub fn gap_report_with(model: &PressureModel, k_orbits: &[PeriodicOrbit], alpha_points: usize) -> Result<GapReport> {
    let map = model.map();
    let hyp = classical::hyperbolicity(map, 16, 16)?;
    let (_, q_plus, _, _) = model.orbit_extremes();
    let q_bar = model.q().mean();
    let p_half = model.pressure(1.0, -0.5, 0.0).value;
    let thick_lhs = pressure_on_orbit_set(map, k_orbits, &Potential::phi(-1.0))?;
    let conj = pressure_on_orbit_set(map, k_orbits, &Potential::phi(-0.5))?;
    let mut beta_alpha = Vec::new();
    if q_plus > q_bar && alpha_points > 0 {
        let grid = default_beta_grid();
        let alphas: Vec<f64> = (1..=alpha_points)
            .map(|i| q_bar + (q_plus - q_bar) * i as f64 / (alpha_points + 1) as f64)
            .collect();
        let table = model.rate_function(&grid, &alphas)?;
        for (a, h) in alphas.iter().zip(&table.h) {
            beta_alpha.push((*a, beta_of_alpha(hyp.nu_min, hyp.lambda_max, *h)));
        }
    }
    Ok(GapReport {
        pressure_cond: Condition::less(p_half, q_plus),
        thickness_cond: Condition::less(thick_lhs, hyp.nu_min / 2.0 - hyp.lambda_max),
        constcurv_cond: Condition::less(0.0, hyp.lambda_max / 2.0),
        conjecture_cond: Condition::less(conj, 0.0),
        q_plus,
        q_bar,
        beta_alpha,
    })
}

/// `C ↦ P(−C·a − φ⁺/2)` together with its large-`C` limit on `K`.
pub fn pressure_scaling_scan(
    map: &TorusMap,
    a: &Observable,
    k_orbits: &[PeriodicOrbit],
    c_list: &[f64],
) -> Result<(Vec<(f64, f64)>, f64)> {
    let model = PressureModel::new(map, a, DEFAULT_N_RANGE)?;
    let scan = c_list
        .iter()
        .map(|c| (*c, model.pressure(-c, -0.5, 0.0).value))
        .collect();
    let limit = pressure_on_orbit_set(map, k_orbits, &Potential::phi(-0.5))?;
    Ok((scan, limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_lam() -> f64 {
        ((3.0 + 5f64.sqrt()) / 2.0).ln()
    }

    fn cosx() -> Observable {
        Observable::cosine((1, 0), 1.0)
    }

    #[test]
    fn pressure_of_zero_is_entropy() {
        let p = pressure(&TorusMap::cat(), &Potential::phi(0.0), DEFAULT_N_RANGE).unwrap();
        assert!((p.value - log_lam()).abs() < 1e-3);
        assert!((p.value - p.partial.last().unwrap().1).abs() <= p.error_est + 1e-15);
        assert!(p.partial.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn pressure_of_minus_phi_vanishes() {
        let p = pressure(&TorusMap::cat(), &Potential::phi(-1.0), DEFAULT_N_RANGE).unwrap();
        assert!(p.value.abs() < 1e-3);
    }

    #[test]
    fn constant_shift_is_exact_at_every_n() {
        let model = PressureModel::new(&TorusMap::cat(), &cosx(), (6, 10)).unwrap();
        let a = model.pressure(0.7, -0.5, 0.0);
        let b = model.pressure(0.7, -0.5, 0.31);
        for (x, y) in a.partial.iter().zip(&b.partial) {
            assert!((y.1 - x.1 - 0.31).abs() < 1e-12);
        }
        assert!((b.value - a.value - 0.31).abs() < 1e-12);
    }

    #[test]
    fn pressure_on_orbit_set_examples() {
        let cat = TorusMap::cat();
        let fixed = classical::periodic_orbits(&cat, 1, ORBIT_CAP).unwrap();
        let v = pressure_on_orbit_set(&cat, &fixed, &Potential::phi(-0.5)).unwrap();
        assert!((v + 0.4812118250596034).abs() < 1e-12);
        let some = classical::periodic_orbits(&cat, 3, ORBIT_CAP).unwrap();
        assert_eq!(pressure_on_orbit_set(&cat, &some, &Potential::phi(0.0)).unwrap(), 0.0);
        assert!(pressure_on_orbit_set(&cat, &[], &Potential::phi(0.0)).is_err());
        // max rule: orbit averages of cos(2πx) differ between the orbits of period 2
        let two = classical::periodic_orbits(&cat, 2, ORBIT_CAP).unwrap();
        let f = Potential::new(cosx(), 1.0, 0.0, 0.0);
        let best = two
            .iter()
            .map(|o| classical::orbit_average(&cat, o, &cosx()))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((pressure_on_orbit_set(&cat, &two, &f).unwrap() - best).abs() < 1e-15);
    }

    #[test]
    fn rate_function_basic_shape() {
        let model = PressureModel::new(&TorusMap::cat(), &cosx(), (6, 12)).unwrap();
        let beta = default_beta_grid();
        let s = model.default_s_grid(&beta, 41);
        let t = model.rate_function(&beta, &s).unwrap();
        assert!(t.eval(t.q_bar).abs() < 1e-3);
        assert!(t.h.iter().all(|h| *h <= 0.0));
        assert!((t.domain.1 - 1.0).abs() < 1e-12);
        for (s, h) in t.s_grid.iter().zip(&t.h) {
            if *s >= t.domain.0 && *s <= t.domain.1 {
                assert!(*h >= -log_lam() - 1e-9, "H({s}) = {h}");
            }
        }
        let out = model.rate_function(&beta, &[1.5, -1.5]).unwrap();
        assert!(out.h.iter().all(|h| *h == f64::NEG_INFINITY));
        assert!(t.concavity_warning.is_none(), "{:?}", t.concavity_warning);
    }

    #[test]
    fn rate_function_degenerates_for_zero_q() {
        let t = rate_function(&TorusMap::cat(), &Observable::zero(), &default_beta_grid(), &[-0.1, 0.0, 0.1]).unwrap();
        assert_eq!(t.domain, (0.0, 0.0));
        assert_eq!(t.h[1], 0.0);
        assert_eq!(t.h[0], f64::NEG_INFINITY);
        assert_eq!(t.h[2], f64::NEG_INFINITY);
    }

    #[test]
    fn sentinel_serialization() {
        let t = RateFunctionTable {
            s_grid: vec![0.0, 1.0],
            h: vec![0.0, f64::NEG_INFINITY],
            domain: (0.0, 0.5),
            q_bar: 0.0,
            concavity_warning: None,
        };
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"-inf\""));
        let back: RateFunctionTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn gap_report_constant_damping_fails_pressure_condition() {
        let cat = TorusMap::cat();
        let fixed = classical::periodic_orbits(&cat, 1, ORBIT_CAP).unwrap();
        let r = gap_report(&cat, &Observable::constant(-0.2), &fixed).unwrap();
        assert!(!r.pressure_cond.holds);
        assert!((r.pressure_cond.lhs - (-0.2 + log_lam() / 2.0)).abs() < 1e-3);
        assert!(r.constcurv_cond.holds);
        assert_eq!(r.thickness_cond.holds, r.constcurv_cond.holds);
        assert!(r.conjecture_cond.holds);
    }

    #[test]
    fn scaling_scan_decreases_to_orbit_limit() {
        let cat = TorusMap::cat();
        let a = Observable::constant(0.5).add(&Observable::cosine((1, 0), -0.5));
        let fixed = classical::periodic_orbits(&cat, 1, ORBIT_CAP).unwrap();
        let cs = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0];
        let (scan, limit) = pressure_scaling_scan(&cat, &a, &fixed, &cs).unwrap();
        assert!(scan.windows(2).all(|w| w[1].1 < w[0].1));
        assert!(scan.iter().all(|(_, p)| *p >= limit - 1e-3));
        assert!((limit + log_lam() / 2.0).abs() < 1e-12);
    }
}
