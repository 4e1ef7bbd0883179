//! Hyperbolic torus maps: orbits, tangent dynamics, Birkhoff averages,
//! periodic orbits and Monte Carlo deviation volumes.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use faer::c64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce into `[0, 1)`. `rem_euclid` can return exactly 1.0 for tiny negatives.
#[inline]
pub fn wrap(v: f64) -> f64 {
    let r = v.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed distance to the nearest integer.
#[inline]
pub fn wrap_signed(v: f64) -> f64 {
    v - v.round()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub x: f64,
    pub p: f64,
}

impl TorusPoint {
    pub fn new(x: f64, p: f64) -> Self {
        Self { x: wrap(x), p: wrap(p) }
    }

    pub fn origin() -> Self {
        Self { x: 0.0, p: 0.0 }
    }

    /// Euclidean distance on the flat torus.
    pub fn dist(&self, other: &TorusPoint) -> f64 {
        let dx = wrap_signed(self.x - other.x);
        let dp = wrap_signed(self.p - other.p);
        dx.hypot(dp)
    }
}

#[derive(Clone, Copy, Debug)]
struct Term {
    k1: f64,
    k2: f64,
    c: c64,
}

/// Real trigonometric polynomial `Σ c_k e^{2πi(k₁x + k₂p)}`.
#[derive(Clone, Debug)]
pub struct Observable {
    coeffs: BTreeMap<(i32, i32), c64>,
    mean: f64,
    // one representative of each ±k pair, weight already doubled
    half: Vec<Term>,
}

impl PartialEq for Observable {
    fn eq(&self, other: &Self) -> bool {
        self.coeffs == other.coeffs
    }
}

fn is_positive_half(k: (i32, i32)) -> bool {
    k.0 > 0 || (k.0 == 0 && k.1 > 0)
}

impl Observable {
    pub fn new(coeffs: BTreeMap<(i32, i32), c64>) -> Result<Self> {
        let coeffs: BTreeMap<_, _> = coeffs.into_iter().filter(|(_, c)| c.norm() > 0.0).collect();
        for (&k, &c) in &coeffs {
            let neg = (-k.0, -k.1);
            let partner = coeffs.get(&neg).copied().unwrap_or(c64::new(0.0, 0.0));
            let tol = 1e-12 * (1.0 + c.norm());
            if (partner - c.conj()).norm() > tol {
                return Err(Error::NonHermitianObservable { k, neg });
            }
        }
        let mean = coeffs.get(&(0, 0)).map(|c| c.re).unwrap_or(0.0);
        let half = coeffs
            .iter()
            .filter(|(k, _)| is_positive_half(**k))
            .map(|(k, c)| Term {
                k1: k.0 as f64,
                k2: k.1 as f64,
                c: *c * 2.0,
            })
            .collect();
        Ok(Self { coeffs, mean, half })
    }

    pub fn zero() -> Self {
        Self::new(BTreeMap::new()).unwrap()
    }

    pub fn constant(c: f64) -> Self {
        Self::new(BTreeMap::from([((0, 0), c64::new(c, 0.0))])).unwrap()
    }

    /// `amp · cos(2π k·ρ)`.
    pub fn cosine(k: (i32, i32), amp: f64) -> Self {
        if k == (0, 0) {
            return Self::constant(amp);
        }
        let h = c64::new(amp / 2.0, 0.0);
        Self::new(BTreeMap::from([(k, h), ((-k.0, -k.1), h)])).unwrap()
    }

    /// `amp · sin(2π k·ρ)`.
    pub fn sine(k: (i32, i32), amp: f64) -> Self {
        if k == (0, 0) {
            return Self::zero();
        }
        let h = c64::new(0.0, -amp / 2.0);
        Self::new(BTreeMap::from([(k, h), ((-k.0, -k.1), h.conj())])).unwrap()
    }

    pub fn coeffs(&self) -> &BTreeMap<(i32, i32), c64> {
        &self.coeffs
    }

    pub fn coeff(&self, k: (i32, i32)) -> c64 {
        self.coeffs.get(&k).copied().unwrap_or(c64::new(0.0, 0.0))
    }

    /// Zero-frequency coefficient, the Lebesgue mean.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn is_constant(&self) -> bool {
        self.half.is_empty()
    }

    /// Largest |k₁| or |k₂| in the support.
    pub fn bandwidth(&self) -> i32 {
        self.coeffs
            .keys()
            .map(|k| k.0.abs().max(k.1.abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn add(&self, other: &Observable) -> Observable {
        let mut c = self.coeffs.clone();
        for (k, v) in &other.coeffs {
            *c.entry(*k).or_insert(c64::new(0.0, 0.0)) += *v;
        }
        Observable::new(c).expect("sum of real observables is real")
    }

    pub fn scale(&self, s: f64) -> Observable {
        let c = self.coeffs.iter().map(|(k, v)| (*k, *v * s)).collect();
        Observable::new(c).expect("scaled real observable is real")
    }

    pub fn shift(&self, c: f64) -> Observable {
        self.add(&Observable::constant(c))
    }

    pub fn eval(&self, rho: TorusPoint) -> f64 {
        let mut s = self.mean;
        for t in &self.half {
            let th = 2.0 * PI * (t.k1 * rho.x + t.k2 * rho.p);
            let (sn, cs) = th.sin_cos();
            s += t.c.re * cs - t.c.im * sn;
        }
        s
    }

    /// `(∂q/∂x, ∂q/∂p)`.
    pub fn grad(&self, rho: TorusPoint) -> (f64, f64) {
        let (mut gx, mut gp) = (0.0, 0.0);
        for t in &self.half {
            let th = 2.0 * PI * (t.k1 * rho.x + t.k2 * rho.p);
            let (sn, cs) = th.sin_cos();
            // d/dθ Re(c e^{iθ}) = -c.re sin θ - c.im cos θ
            let d = -t.c.re * sn - t.c.im * cs;
            gx += 2.0 * PI * t.k1 * d;
            gp += 2.0 * PI * t.k2 * d;
        }
        (gx, gp)
    }

    pub fn d2x(&self, rho: TorusPoint) -> f64 {
        let mut s = 0.0;
        for t in &self.half {
            let th = 2.0 * PI * (t.k1 * rho.x + t.k2 * rho.p);
            let (sn, cs) = th.sin_cos();
            let w = 2.0 * PI * t.k1;
            s -= w * w * (t.c.re * cs - t.c.im * sn);
        }
        s
    }

    /// `q ∘ M` for an integer matrix `M = [a, b, c, d]`: e_k(Mρ) = e_{Mᵀk}(ρ).
    pub fn compose_linear(&self, m: [i64; 4]) -> Observable {
        let [a, b, c, d] = m;
        let mut out = BTreeMap::new();
        for (&(k1, k2), &v) in &self.coeffs {
            let (k1, k2) = (k1 as i64, k2 as i64);
            let n1 = a * k1 + c * k2;
            let n2 = b * k1 + d * k2;
            *out.entry((n1 as i32, n2 as i32)).or_insert(c64::new(0.0, 0.0)) += v;
        }
        Observable::new(out).expect("composition preserves reality")
    }

    /// Extrema sampled on an `n × n` lattice.
    pub fn range_on_grid(&self, n: usize) -> (f64, f64) {
        if self.is_constant() {
            return (self.mean, self.mean);
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            for j in 0..n {
                let v = self.eval(TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64));
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    /// Bounds `[min q, max q]` on a 256² lattice widened by the lattice error bound.
    pub fn bounds(&self) -> (f64, f64) {
        if self.is_constant() {
            return (self.mean, self.mean);
        }
        let n = 256;
        let (lo, hi) = self.range_on_grid(n);
        // |∇q| ≤ Σ 2π|k||c|, lattice points are within √2/(2n) of every point
        let lip: f64 = self
            .half
            .iter()
            .map(|t| 2.0 * PI * t.k1.hypot(t.k2) * t.c.norm())
            .sum();
        let h = std::f64::consts::SQRT_2 / (2.0 * n as f64);
        let curv: f64 = self
            .half
            .iter()
            .map(|t| 4.0 * PI * PI * (t.k1 * t.k1 + t.k2 * t.k2) * t.c.norm())
            .sum();
        // extrema are critical points, so the lattice misses them by O(h²)
        let slack = (0.5 * curv * h * h).min(lip * h);
        (lo - slack, hi + slack)
    }
}

impl Serialize for Observable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m: BTreeMap<String, [f64; 2]> = self
            .coeffs
            .iter()
            .map(|(k, c)| (format!("{},{}", k.0, k.1), [c.re, c.im]))
            .collect();
        m.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Observable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let m = BTreeMap::<String, [f64; 2]>::deserialize(d)?;
        let mut coeffs = BTreeMap::new();
        for (key, [re, im]) in m {
            let (a, b) = key
                .split_once(',')
                .ok_or_else(|| D::Error::custom(format!("bad frequency key {key:?}")))?;
            let k1: i32 = a.trim().parse().map_err(D::Error::custom)?;
            let k2: i32 = b.trim().parse().map_err(D::Error::custom)?;
            coeffs.insert((k1, k2), c64::new(re, im));
        }
        Observable::new(coeffs).map_err(D::Error::custom)
    }
}

/// Kick strength limit: `eps · max|V''| ≤ KICK_MARGIN · (|tr M| − 2)`.
pub const KICK_MARGIN: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TorusMap {
    Linear { m: [i64; 4] },
    /// Shear kick `p ↦ p + eps·V'(x)` followed by the linear part.
    Perturbed { m: [i64; 4], eps: f64, kick: Observable },
}

impl TorusMap {
    pub fn linear(a: i64, b: i64, c: i64, d: i64) -> Result<Self> {
        let map = TorusMap::Linear { m: [a, b, c, d] };
        map.validate()?;
        Ok(map)
    }

    /// The standard cat map `[[2,1],[1,1]]`.
    pub fn cat() -> Self {
        TorusMap::Linear { m: [2, 1, 1, 1] }
    }

    pub fn perturbed(m: [i64; 4], eps: f64, kick: Observable) -> Result<Self> {
        let map = TorusMap::Perturbed { m, eps, kick };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c, d] = self.matrix();
        if a * d - b * c != 1 {
            return Err(Error::InvalidMap(format!("det = {} (must be 1)", a * d - b * c)));
        }
        if (a + d).abs() <= 2 {
            return Err(Error::InvalidMap(format!("|trace| = {} is not hyperbolic", (a + d).abs())));
        }
        if let TorusMap::Perturbed { eps, kick, .. } = self {
            if kick.coeffs().keys().any(|k| k.1 != 0) {
                return Err(Error::InvalidMap("kick must depend on x only".into()));
            }
            let curv = (0..1024)
                .map(|i| kick.d2x(TorusPoint::new(i as f64 / 1024.0, 0.0)).abs())
                .fold(0.0, f64::max);
            let limit = KICK_MARGIN * ((a + d).abs() - 2) as f64;
            if eps.abs() * curv > limit {
                return Err(Error::InvalidMap(format!(
                    "eps·max|V''| = {:.4} exceeds hyperbolicity threshold {:.4}",
                    eps.abs() * curv,
                    limit
                )));
            }
        }
        Ok(())
    }

    pub fn matrix(&self) -> [i64; 4] {
        match self {
            TorusMap::Linear { m } | TorusMap::Perturbed { m, .. } => *m,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, TorusMap::Linear { .. })
            || matches!(self, TorusMap::Perturbed { eps, .. } if *eps == 0.0)
    }

    /// Leading eigenvalue modulus of the linear part.
    pub fn lambda(&self) -> f64 {
        let [a, _, _, d] = self.matrix();
        let t = (a + d).abs() as f64;
        (t + (t * t - 4.0).sqrt()) / 2.0
    }

    fn kick_force(&self, x: f64) -> f64 {
        match self {
            TorusMap::Linear { .. } => 0.0,
            TorusMap::Perturbed { eps, kick, .. } => {
                if *eps == 0.0 {
                    0.0
                } else {
                    eps * kick.grad(TorusPoint { x, p: 0.0 }).0
                }
            }
        }
    }

    fn kick_shear(&self, x: f64) -> f64 {
        match self {
            TorusMap::Linear { .. } => 0.0,
            TorusMap::Perturbed { eps, kick, .. } => {
                if *eps == 0.0 {
                    0.0
                } else {
                    eps * kick.d2x(TorusPoint { x, p: 0.0 })
                }
            }
        }
    }

    pub fn step(&self, rho: TorusPoint) -> TorusPoint {
        let [a, b, c, d] = self.matrix().map(|v| v as f64);
        let x = rho.x;
        let p = rho.p + self.kick_force(x);
        TorusPoint::new(a * x + b * p, c * x + d * p)
    }

    pub fn step_back(&self, rho: TorusPoint) -> TorusPoint {
        let [a, b, c, d] = self.matrix().map(|v| v as f64);
        let x = wrap(d * rho.x - b * rho.p);
        let p = -c * rho.x + a * rho.p;
        TorusPoint::new(x, p - self.kick_force(x))
    }

    /// Tangent map `dΦ_ρ` as a row-major 2×2 matrix.
    pub fn jacobian(&self, rho: TorusPoint) -> [f64; 4] {
        let [a, b, c, d] = self.matrix().map(|v| v as f64);
        let s = self.kick_shear(rho.x);
        [a + b * s, b, c + d * s, d]
    }
}

/// Discrete-time orbit `Φ^n(ρ)`; negative `n` iterates the inverse.
pub fn evolve(map: &TorusMap, rho: TorusPoint, n: i64) -> TorusPoint {
    let mut r = TorusPoint::new(rho.x, rho.p);
    if n >= 0 {
        for _ in 0..n {
            r = map.step(r);
        }
    } else {
        for _ in 0..(-n) {
            r = map.step_back(r);
        }
    }
    r
}

fn apply(j: [f64; 4], v: [f64; 2]) -> [f64; 2] {
    [j[0] * v[0] + j[1] * v[1], j[2] * v[0] + j[3] * v[1]]
}

fn normalize(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    let mut u = [v[0] / n, v[1] / n];
    if u[0] < 0.0 || (u[0] == 0.0 && u[1] < 0.0) {
        u = [-u[0], -u[1]];
    }
    u
}

pub const UNSTABLE_STEPS: usize = 64;
pub const UNSTABLE_TOL: f64 = 1e-12;

/// Unit unstable direction at `rho`.
pub fn unstable_dir(map: &TorusMap, rho: TorusPoint) -> Result<[f64; 2]> {
    let [a, b, c, d] = map.matrix().map(|v| v as f64);
    if map.is_linear() {
        let lam = if a + d > 0.0 { map.lambda() } else { -map.lambda() };
        // (M − λ)v = 0
        let v = if b != 0.0 { [b, lam - a] } else { [lam - d, c] };
        return Ok(normalize(v));
    }
    let mut past = Vec::with_capacity(UNSTABLE_STEPS);
    let mut r = rho;
    for _ in 0..UNSTABLE_STEPS {
        r = map.step_back(r);
        past.push(r);
    }
    let push = |start: [f64; 2]| {
        let mut v = start;
        for pt in past.iter().rev() {
            v = normalize(apply(map.jacobian(*pt), v));
        }
        v
    };
    let u1 = push([1.0, 0.0]);
    let u2 = push([0.0, 1.0]);
    let defect = (u1[0] * u2[1] - u1[1] * u2[0]).abs();
    if defect > UNSTABLE_TOL {
        return Err(Error::UnstableDirection {
            iterations: UNSTABLE_STEPS,
            defect,
        });
    }
    Ok(u1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentData {
    pub j_plus: f64,
    pub phi_plus_at_rho: f64,
}

/// Unstable Jacobian over `n` steps and the one-step log-stretch.
pub fn tangent_data(map: &TorusMap, rho: TorusPoint, n: usize) -> Result<TangentData> {
    if matches!(map, TorusMap::Linear { .. }) {
        let lam = map.lambda();
        return Ok(TangentData {
            j_plus: lam.powi(n as i32),
            phi_plus_at_rho: lam.ln(),
        });
    }
    let mut u = unstable_dir(map, rho)?;
    let mut r = rho;
    let mut log_j = 0.0;
    let mut phi0 = 0.0;
    for k in 0..n {
        let w = apply(map.jacobian(r), u);
        let s = w[0].hypot(w[1]).ln();
        if k == 0 {
            phi0 = s;
        }
        log_j += s;
        u = normalize(w);
        r = map.step(r);
    }
    if n == 0 {
        let w = apply(map.jacobian(rho), u);
        phi0 = w[0].hypot(w[1]).ln();
    }
    Ok(TangentData {
        j_plus: log_j.exp(),
        phi_plus_at_rho: phi0,
    })
}

/// Expansion data of a hyperbolic map.
#[derive(Clone, Debug)]
pub struct HyperbolicityData {
    pub lambda_max: f64,
    pub nu_min: f64,
    map: TorusMap,
}

impl HyperbolicityData {
    /// One-step log-stretch φ⁺(ρ).
    pub fn phi_plus(&self, rho: TorusPoint) -> Result<f64> {
        Ok(tangent_data(&self.map, rho, 1)?.phi_plus_at_rho)
    }

    pub fn unstable_dir(&self, rho: TorusPoint) -> Result<[f64; 2]> {
        unstable_dir(&self.map, rho)
    }
}

/// Exact for linear maps; sampled on a `grid × grid` lattice over `t` steps otherwise.
pub fn hyperbolicity(map: &TorusMap, grid: usize, t: usize) -> Result<HyperbolicityData> {
    if matches!(map, TorusMap::Linear { .. }) {
        let l = map.lambda().ln();
        return Ok(HyperbolicityData {
            lambda_max: l,
            nu_min: l,
            map: map.clone(),
        });
    }
    let t = t.max(1);
    let mut lmax = f64::NEG_INFINITY;
    let mut nmin = f64::INFINITY;
    for i in 0..grid {
        for j in 0..grid {
            let rho = TorusPoint::new((i as f64 + 0.5) / grid as f64, (j as f64 + 0.5) / grid as f64);
            let td = tangent_data(map, rho, t)?;
            nmin = nmin.min(td.j_plus.ln() / t as f64);
            // operator norm of dΦ^t along the orbit
            let mut jac = [1.0, 0.0, 0.0, 1.0];
            let mut r = rho;
            for _ in 0..t {
                let s = map.jacobian(r);
                jac = [
                    s[0] * jac[0] + s[1] * jac[2],
                    s[0] * jac[1] + s[1] * jac[3],
                    s[2] * jac[0] + s[3] * jac[2],
                    s[2] * jac[1] + s[3] * jac[3],
                ];
                r = map.step(r);
            }
            let fro2 = jac.iter().map(|v| v * v).sum::<f64>();
            // det = 1, so σ_max² + σ_max⁻² = ‖J‖_F²
            let smax2 = (fro2 + (fro2 * fro2 - 4.0).max(0.0).sqrt()) / 2.0;
            lmax = lmax.max(0.5 * smax2.ln() / t as f64);
        }
    }
    Ok(HyperbolicityData {
        lambda_max: lmax.max(nmin),
        nu_min: nmin,
        map: map.clone(),
    })
}

/// Time average of `q` along the orbit of `rho`.
pub fn birkhoff_average(map: &TorusMap, q: &Observable, rho: TorusPoint, n: usize, symmetric: bool) -> f64 {
    assert!(n >= 1, "birkhoff_average needs n >= 1");
    if q.is_constant() {
        return q.mean();
    }
    let start = if symmetric {
        evolve(map, rho, -((n / 2) as i64))
    } else {
        rho
    };
    let mut r = start;
    let mut s = 0.0;
    for _ in 0..n {
        s += q.eval(r);
        r = map.step(r);
    }
    s / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    /// side of the uniform lattice of starting points
    pub lattice: usize,
    /// periodic orbits up to this period refine the extrema (linear maps only)
    pub period_cap: usize,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        Self {
            lattice: 512,
            period_cap: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asymptotics {
    pub q_minus: f64,
    pub q_plus: f64,
    pub q_bar: f64,
}

/// Extremal asymptotic averages `q₋, q₊` and the mean `q̄`.
pub fn asymptotics(map: &TorusMap, q: &Observable, t_max: usize, grid: SamplingGrid) -> Result<Asymptotics> {
    if grid.lattice == 0 {
        return Err(Error::Empty("sampling grid"));
    }
    let q_bar = q.mean();
    if q.is_constant() {
        return Ok(Asymptotics {
            q_minus: q_bar,
            q_plus: q_bar,
            q_bar,
        });
    }
    let t = t_max.max(1);
    let n = grid.lattice;
    let (mut lo, mut hi) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for j in 0..n {
                let rho = TorusPoint::new(i as f64 / n as f64, j as f64 / n as f64);
                let v = birkhoff_average(map, q, rho, t, false);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        })
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY),
            |a, b| (a.0.min(b.0), a.1.max(b.1)),
        );
    if map.is_linear() {
        for period in 1..=grid.period_cap {
            for orb in periodic_orbits(map, period, ORBIT_CAP)? {
                if orb.period != period {
                    continue;
                }
                let v = orbit_average(map, &orb, q);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    Ok(Asymptotics {
        q_minus: lo.min(q_bar),
        q_plus: hi.max(q_bar),
        q_bar,
    })
}

/// Default overflow cap on the period of enumerated orbits.
pub const ORBIT_CAP: usize = 20;

/// A primitive periodic orbit, represented exactly by `num / den` mod 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub point: TorusPoint,
    pub period: usize,
    pub num: [i64; 2],
    pub den: i64,
}

impl PeriodicOrbit {
    /// The orbit's points, iterated in exact integer arithmetic.
    pub fn points(&self, map: &TorusMap) -> Vec<TorusPoint> {
        let [a, b, c, d] = map.matrix();
        let den = self.den as i128;
        let (mut u, mut v) = (self.num[0] as i128, self.num[1] as i128);
        let mut out = Vec::with_capacity(self.period);
        for _ in 0..self.period {
            out.push(TorusPoint::new(u as f64 / den as f64, v as f64 / den as f64));
            let nu = (a as i128 * u + b as i128 * v).rem_euclid(den);
            let nv = (c as i128 * u + d as i128 * v).rem_euclid(den);
            u = nu;
            v = nv;
        }
        out
    }
}

pub fn orbit_average(map: &TorusMap, orbit: &PeriodicOrbit, q: &Observable) -> f64 {
    let pts = orbit.points(map);
    pts.iter().map(|r| q.eval(*r)).sum::<f64>() / pts.len() as f64
}

fn mat_mul_checked(x: [i128; 4], y: [i128; 4]) -> Option<[i128; 4]> {
    let e = |p: i128, q: i128, r: i128, s: i128| p.checked_mul(q)?.checked_add(r.checked_mul(s)?);
    Some([
        e(x[0], y[0], x[1], y[2])?,
        e(x[0], y[1], x[1], y[3])?,
        e(x[2], y[0], x[3], y[2])?,
        e(x[2], y[1], x[3], y[3])?,
    ])
}

/// `M^n` with overflow checking.
pub fn matrix_power(m: [i64; 4], n: usize) -> Option<[i128; 4]> {
    let m = m.map(|v| v as i128);
    let mut r = [1, 0, 0, 1];
    for _ in 0..n {
        r = mat_mul_checked(r, m)?;
        if r.iter().any(|v| v.abs() > (1i128 << 62)) {
            return None;
        }
    }
    Some(r)
}

fn ext_gcd(a: i128, b: i128) -> (i128, i128, i128) {
    if b == 0 {
        (a, 1, 0)
    } else {
        let (g, x, y) = ext_gcd(b, a.rem_euclid(b));
        (g, y, x - (a.div_euclid(b)) * y)
    }
}

/// Exact fixed points of `M^n` as integer numerators over `den = |det(M^n − I)|`.
pub fn fixed_points(map: &TorusMap, n: usize, cap: usize) -> Result<(i64, Vec<[i64; 2]>)> {
    if !map.is_linear() {
        return Err(Error::LinearOnly);
    }
    if n == 0 || n > cap {
        return Err(Error::OrbitCap { n, cap });
    }
    let mp = matrix_power(map.matrix(), n).ok_or(Error::OrbitCap { n, cap })?;
    let a = [mp[0] - 1, mp[1], mp[2], mp[3] - 1];
    let det = a[0] * a[3] - a[1] * a[2];
    let den = det.abs();
    if den == 0 {
        return Err(Error::InvalidMap("M^n − I is singular".into()));
    }
    if den > i64::MAX as i128 / 16 {
        return Err(Error::OrbitCap { n, cap });
    }
    // column Hermite form A·U = [[g, 0], [h21, h22]] gives coset representatives
    let (g, _, _) = ext_gcd(a[0], a[1]);
    let (h11, h22) = (g.abs(), (det / g).abs());
    debug_assert_eq!(h11 * h22, den);
    let adj = [a[3], -a[1], -a[2], a[0]];
    let sign = det.signum();
    let mut pts = Vec::with_capacity(den as usize);
    for i in 0..h11 {
        for j in 0..h22 {
            let u = (sign * (adj[0] * i + adj[1] * j)).rem_euclid(den);
            let v = (sign * (adj[2] * i + adj[3] * j)).rem_euclid(den);
            pts.push([u as i64, v as i64]);
        }
    }
    Ok((den as i64, pts))
}

/// All points with `(Mⁿ − I)x ∈ ℤ²`, grouped into primitive orbits.
pub fn periodic_orbits(map: &TorusMap, n: usize, cap: usize) -> Result<Vec<PeriodicOrbit>> {
    let (den, pts) = fixed_points(map, n, cap)?;
    let [a, b, c, d] = map.matrix().map(|v| v as i128);
    let index: HashMap<[i64; 2], usize> = pts.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut seen = vec![false; pts.len()];
    let mut orbits = Vec::new();
    let den128 = den as i128;
    for start in 0..pts.len() {
        if seen[start] {
            continue;
        }
        let mut period = 0;
        let mut cur = pts[start];
        loop {
            let idx = index[&cur];
            if seen[idx] {
                break;
            }
            seen[idx] = true;
            period += 1;
            let (u, v) = (cur[0] as i128, cur[1] as i128);
            cur = [
                (a * u + b * v).rem_euclid(den128) as i64,
                (c * u + d * v).rem_euclid(den128) as i64,
            ];
        }
        let p = pts[start];
        orbits.push(PeriodicOrbit {
            point: TorusPoint::new(p[0] as f64 / den as f64, p[1] as f64 / den as f64),
            period,
            num: p,
            den,
        });
    }
    Ok(orbits)
}

pub(crate) fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch);
    rng
}

pub const MC_BATCH: usize = 1 << 16;

/// Monte Carlo estimate of `μ_L{ρ : ⟨q⟩_t(ρ) ≥ α}`.
pub fn deviation_volume(map: &TorusMap, q: &Observable, t: usize, alpha: f64, samples: usize, seed: u64) -> f64 {
    deviation_volume_with(samples, seed, |rho| birkhoff_average(map, q, rho, t.max(1), false) >= alpha)
}

/// Same as [`deviation_volume`] with the symmetric average.
pub fn deviation_volume_sym(map: &TorusMap, q: &Observable, t: usize, alpha: f64, samples: usize, seed: u64) -> f64 {
    deviation_volume_with(samples, seed, |rho| birkhoff_average(map, q, rho, t.max(1), true) >= alpha)
}

fn deviation_volume_with(samples: usize, seed: u64, hit: impl Fn(TorusPoint) -> bool + Sync) -> f64 {
    if samples == 0 {
        return 0.0;
    }
    let batches = samples.div_ceil(MC_BATCH);
    let count: u64 = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = batch_rng(seed, b as u64);
            let len = MC_BATCH.min(samples - b * MC_BATCH);
            let mut c = 0u64;
            for _ in 0..len {
                let rho = TorusPoint::new(rng.random::<f64>(), rng.random::<f64>());
                if hit(rho) {
                    c += 1;
                }
            }
            c
        })
        .sum();
    count as f64 / samples as f64
}
