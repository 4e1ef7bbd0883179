//! Config-driven experiment runner: schema validation, per-experiment drivers,
//! CSV/JSON/gzip emission and the run manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flate2::write::GzEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::classical::{self, Observable, SamplingGrid, TorusMap, TorusPoint};
use crate::dispersion;
use crate::error::{Error, Result};
use crate::qtorus::{self, HilbertGrid};
use crate::spectra::{self, SpectrumRecord};
use crate::thermo::{self, PressureModel};
use crate::wave::{self, DampingProfile};

/// Worker-count override for the task pool.
pub const WORKERS_ENV: &str = "DAMPEDLAB_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Classical,
    Pressure,
    QmapSpectrum,
    FractalWeyl,
    DispersionPaths,
    DispersionProjector,
    Dwe,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Classical,
        ExperimentKind::Pressure,
        ExperimentKind::QmapSpectrum,
        ExperimentKind::FractalWeyl,
        ExperimentKind::DispersionPaths,
        ExperimentKind::DispersionProjector,
        ExperimentKind::Dwe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Classical => "classical",
            ExperimentKind::Pressure => "pressure",
            ExperimentKind::QmapSpectrum => "qmap_spectrum",
            ExperimentKind::FractalWeyl => "fractal_weyl",
            ExperimentKind::DispersionPaths => "dispersion_paths",
            ExperimentKind::DispersionProjector => "dispersion_projector",
            ExperimentKind::Dwe => "dwe",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Experiments drawing random samples need an explicit seed.
    pub fn stochastic(self) -> bool {
        matches!(
            self,
            ExperimentKind::Classical | ExperimentKind::DispersionProjector | ExperimentKind::Dwe
        )
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Classical => &["t_max", "samples", "t", "alphas", "hyperbolicity_grid"],
            ExperimentKind::Pressure => &["n_range", "alpha_points"],
            ExperimentKind::QmapSpectrum => &["n_list", "band_eps", "concentration_eps", "save_matrices"],
            ExperimentKind::FractalWeyl => &["n_list", "alpha", "alpha_fraction"],
            ExperimentKind::DispersionPaths => &["n_list", "j", "steps", "center", "prune_tol", "pressure_steps"],
            ExperimentKind::DispersionProjector => &["n_list", "eps", "alpha_level", "samples", "norm5_cap"],
            ExperimentKind::Dwe => &[
                "profile",
                "k",
                "t_final",
                "time_steps",
                "regularity",
                "gcc_time",
                "directions",
                "offsets",
            ],
        }
    }

    fn assertions(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::Classical => &["ordering"],
            ExperimentKind::Pressure => &["pressure_condition", "thickness_condition"],
            ExperimentKind::QmapSpectrum => &["band", "residual", "concentration_monotone"],
            ExperimentKind::FractalWeyl => &["slope_bound"],
            ExperimentKind::DispersionPaths => &["reconstruction", "c_stable", "pressure_rate"],
            ExperimentKind::DispersionProjector => &["polar", "rank_volume", "exponent", "norm_bound"],
            ExperimentKind::Dwe => &["strip", "symmetry", "decay_rate", "gcc"],
        }
    }

    fn uses_map(self) -> bool {
        self != ExperimentKind::Dwe
    }
}

const COMMON_KEYS: [&str; 4] = ["experiment", "seed", "output_dir", "assert"];
const MAP_KEYS: [&str; 2] = ["map", "damping"];

/// `constant + Σ amp·cos 2π(k·ρ) + Σ amp·sin 2π(k·ρ)`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    #[serde(default)]
    pub constant: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cos: Vec<(i32, i32, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sin: Vec<(i32, i32, f64)>,
}

impl ObservableSpec {
    pub fn build(&self) -> Observable {
        let mut q = Observable::constant(self.constant);
        for &(k1, k2, amp) in &self.cos {
            q = q.add(&Observable::cosine((k1, k2), amp));
        }
        for &(k1, k2, amp) in &self.sin {
            q = q.add(&Observable::sine((k1, k2), amp));
        }
        q
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub matrix: [i64; 4],
    #[serde(default, skip_serializing_if = "is_zero")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kick: Option<ObservableSpec>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl Default for MapSpec {
    fn default() -> Self {
        Self {
            matrix: [2, 1, 1, 1],
            eps: 0.0,
            kick: None,
        }
    }
}

impl MapSpec {
    pub fn build(&self) -> Result<TorusMap> {
        let [a, b, c, d] = self.matrix;
        match (&self.kick, self.eps) {
            (Some(k), eps) if eps != 0.0 => TorusMap::perturbed(self.matrix, eps, k.build()),
            _ => TorusMap::linear(a, b, c, d),
        }
    }
}

/// A validated experiment configuration. Keys that do not apply to the chosen
/// experiment are rejected at parse time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default, rename = "assert", skip_serializing_if = "Vec::is_empty")]
    pub assertions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<ObservableSpec>,
    #[serde(default, rename = "n_list", skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperbolicity_grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_range: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concentration_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_matrices: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm5_cap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<DampingProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gcc_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<usize>,
}

fn default_output_dir() -> String {
    "out".into()
}

/// Validates `text` and returns the config or every schema violation found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config(vec!["config must be a JSON object".into()]))?;
    let mut errors = Vec::new();
    let kind = match obj.get("experiment") {
        None => {
            errors.push("missing key \"experiment\"".to_string());
            None
        }
        Some(Value::String(s)) => {
            let k = ExperimentKind::from_name(s);
            if k.is_none() {
                let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                errors.push(format!("unknown experiment \"{s}\" (expected one of {})", names.join(", ")));
            }
            k
        }
        Some(_) => {
            errors.push("\"experiment\" must be a string".to_string());
            None
        }
    };
    if let Some(kind) = kind {
        let mut allowed: BTreeSet<&str> = COMMON_KEYS.into_iter().collect();
        allowed.extend(kind.keys());
        if kind.uses_map() {
            allowed.extend(MAP_KEYS);
        }
        for key in obj.keys() {
            if !allowed.contains(key.as_str()) {
                errors.push(format!("unknown key \"{key}\" for experiment {}", kind.name()));
            }
        }
        if kind.stochastic() && obj.get("seed").is_none_or(|s| s.is_null()) {
            errors.push(format!("experiment {} is stochastic and needs a \"seed\"", kind.name()));
        }
        if let Some(Value::Array(list)) = obj.get("assert") {
            for a in list {
                match a.as_str() {
                    Some(name) if kind.assertions().contains(&name) => {}
                    Some(name) => errors.push(format!(
                        "unknown assertion \"{name}\" for experiment {} (expected one of {})",
                        kind.name(),
                        kind.assertions().join(", ")
                    )),
                    None => errors.push("assertions must be strings".into()),
                }
            }
        }
    }
    if let Some(list) = obj.get("n_list") {
        match list.as_array() {
            Some(items) if !items.is_empty() => {
                for v in items {
                    if v.as_i64().is_none_or(|n| n <= 0) {
                        errors.push(format!("N must be a positive integer, got {v}"));
                    }
                }
            }
            Some(_) => errors.push("\"n_list\" must not be empty".into()),
            None => errors.push("\"n_list\" must be an array".into()),
        }
    }
    for key in ["k", "j", "steps", "samples", "t", "t_max"] {
        if let Some(v) = obj.get(key) {
            if v.as_i64().is_none_or(|n| n <= 0) {
                errors.push(format!("\"{key}\" must be a positive integer, got {v}"));
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// sha256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    fn map(&self) -> Result<TorusMap> {
        self.map.clone().unwrap_or_default().build()
    }

    fn damping(&self) -> Observable {
        self.damping.clone().unwrap_or_default().build()
    }

    fn n_list(&self, default: &[usize]) -> Vec<usize> {
        self.n_list.clone().unwrap_or_else(|| default.to_vec())
    }

    fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config(vec![format!("experiment {} needs a seed", self.experiment.name())]))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub tool_version: String,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputFile>,
    pub assertions: Vec<AssertionResult>,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// Writes files under one directory and remembers their content hashes.
pub struct Emitter {
    dir: PathBuf,
    outputs: Vec<OutputFile>,
}

impl Emitter {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// gzip with a zeroed header timestamp, so output stays byte-stable.
    pub fn json_gz<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        serde_json::to_writer(&mut enc, value)?;
        let bytes = enc.finish()?;
        self.write(name, &bytes)
    }

    pub fn csv(&mut self, name: &str, text: &str) -> Result<()> {
        self.write(name, text.as_bytes())
    }

    pub fn outputs(&self) -> &[OutputFile] {
        &self.outputs
    }
}

/// CSV for a list of spectrum records: one header, rows tagged by `N`.
pub fn spectra_csv(records: &[SpectrumRecord]) -> String {
    let mut out = String::from("n,re,im,modulus,decay_rate\n");
    for r in records {
        for line in r.to_csv().lines().skip(1) {
            out.push_str(&format!("{},{line}\n", r.n()));
        }
    }
    out
}

struct Ctx {
    emitter: Emitter,
    stages: Vec<StageTiming>,
    checks: Vec<AssertionResult>,
}

impl Ctx {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Emitter) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(&mut self.emitter).map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: name.to_string(),
                cause: Box::new(other),
            },
        });
        self.stages.push(StageTiming {
            stage: name.to_string(),
            wall_s: start.elapsed().as_secs_f64(),
        });
        out
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(AssertionResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

/// Task pool sized by `DAMPEDLAB_WORKERS` (rayon's default otherwise).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(vec![format!("{WORKERS_ENV} must be a positive integer, got {v:?}")]))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Config(vec![format!("cannot start worker pool: {e}")]))
}

/// Runs the experiment, writes its outputs and `manifest.json`, and returns
/// the manifest. Only the assertions listed in the config are enforced.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let pool = worker_pool()?;
    let mut ctx = Ctx {
        emitter: Emitter::new(&cfg.output_dir)?,
        stages: Vec::new(),
        checks: Vec::new(),
    };
    ctx.emitter.json("config.json", cfg)?;
    pool.install(|| match cfg.experiment {
        ExperimentKind::Classical => run_classical(cfg, &mut ctx),
        ExperimentKind::Pressure => run_pressure(cfg, &mut ctx),
        ExperimentKind::QmapSpectrum => run_qmap_spectrum(cfg, &mut ctx),
        ExperimentKind::FractalWeyl => run_fractal_weyl(cfg, &mut ctx),
        ExperimentKind::DispersionPaths => run_dispersion_paths(cfg, &mut ctx),
        ExperimentKind::DispersionProjector => run_dispersion_projector(cfg, &mut ctx),
        ExperimentKind::Dwe => run_dwe(cfg, &mut ctx),
    })?;
    let enforced: BTreeSet<&str> = cfg.assertions.iter().map(String::as_str).collect();
    let assertions: Vec<AssertionResult> = ctx
        .checks
        .into_iter()
        .filter(|c| enforced.contains(c.name.as_str()))
        .collect();
    let manifest = RunManifest {
        experiment: cfg.experiment,
        config_hash: cfg.hash()?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        stages: ctx.stages,
        outputs: ctx.emitter.outputs().to_vec(),
        assertions,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(Path::new(&cfg.output_dir).join("manifest.json"), text)?;
    Ok(manifest)
}

fn asymptotics_for(map: &TorusMap, q: &Observable) -> Result<classical::Asymptotics> {
    classical::asymptotics(map, q, 40, SamplingGrid::default())
}

fn run_classical(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<()> {
    let map = cfg.map()?;
    let q = cfg.damping();
    let seed = cfg.seed()?;
    let grid = cfg.hyperbolicity_grid.unwrap_or(32);
    let hyp = ctx.stage("hyperbolicity", |_| classical::hyperbolicity(&map, grid, 20))?;
    let asy = ctx.stage("asymptotics", |_| {
        classical::asymptotics(&map, &q, cfg.t_max.unwrap_or(40), SamplingGrid::default())
    })?;
    let orbits = ctx.stage("periodic_orbits", |_| {
        (1..=8)
            .map(|n| classical::periodic_orbits(&map, n, classical::ORBIT_CAP).map(|o| (n, o.len())))
            .collect::<Result<Vec<_>>>()
    });
    let t = cfg.t.unwrap_or(20);
    let samples = cfg.samples.unwrap_or(100_000);
    let alphas = cfg.alphas.clone().unwrap_or_else(|| vec![asy.q_bar + 0.25 * (asy.q_plus - asy.q_bar)]);
    let deviations = ctx.stage("deviation_volume", |_| {
        Ok(alphas
            .par_iter()
            .map(|&a| {
                let mu = classical::deviation_volume(&map, &q, t, a, samples, seed);
                json!({"alpha": a, "volume": mu, "rate": mu.ln() / t as f64})
            })
            .collect::<Vec<_>>())
    })?;
    let summary = json!({
        "lambda_max": hyp.lambda_max,
        "nu_min": hyp.nu_min,
        "asymptotics": asy,
        "orbit_counts": orbits.as_ref().ok(),
        "orbit_error": orbits.as_ref().err().map(|e| e.to_string()),
        "deviation": {"t": t, "samples": samples, "seed": seed, "levels": deviations},
    });
    ctx.stage("emit", |em| em.json("classical.json", &summary))?;
    let ordered = asy.q_minus <= asy.q_bar + 1e-12 && asy.q_bar <= asy.q_plus + 1e-12;
    ctx.check(
        "ordering",
        ordered,
        format!("q- = {:.6}, mean = {:.6}, q+ = {:.6}", asy.q_minus, asy.q_bar, asy.q_plus),
    );
    Ok(())
}

fn run_pressure(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<()> {
    let map = cfg.map()?;
    let q = cfg.damping();
    let n_range = cfg.n_range.unwrap_or(thermo::DEFAULT_N_RANGE);
    let model = ctx.stage("orbit_sums", |_| PressureModel::new(&map, &q, n_range))?;
    let beta_grid = thermo::default_beta_grid();
    let table = ctx.stage("rate_function", |_| {
        let s_grid = model.default_s_grid(&beta_grid, 81);
        model.rate_function(&beta_grid, &s_grid)
    })?;
    let (_, _, _, k_plus) = model.orbit_extremes();
    let gap = ctx.stage("gap_report", |_| {
        thermo::gap_report_with(&model, &k_plus, cfg.alpha_points.unwrap_or(41))
    })?;
    let summary = json!({
        "n_range": n_range,
        "p_zero": model.pressure(0.0, 0.0, 0.0),
        "p_minus_phi": model.pressure(0.0, -1.0, 0.0),
        "p_q_minus_half_phi": model.pressure(1.0, -0.5, 0.0),
        "rate_function": table,
        "gap": gap,
    });
    ctx.stage("emit", |em| {
        em.json("pressure.json", &summary)?;
        em.csv("rate_function.csv", &table.to_csv())
    })?;
    ctx.check(
        "pressure_condition",
        gap.pressure_cond.holds,
        format!("P(q - phi/2) = {:.6} vs q+ = {:.6}", gap.pressure_cond.lhs, gap.pressure_cond.rhs),
    );
    ctx.check(
        "thickness_condition",
        gap.thickness_cond.holds,
        format!("lhs {:.6} vs rhs {:.6}", gap.thickness_cond.lhs, gap.thickness_cond.rhs),
    );
    Ok(())
}

fn spectra_on_ladder(
    map: &TorusMap,
    q: &Observable,
    ns: &[usize],
    save: bool,
    em: &mut Emitter,
) -> Result<Vec<SpectrumRecord>> {
    let out: Vec<Result<(SpectrumRecord, Option<Vec<u8>>)>> = ns
        .par_iter()
        .map(|&n| {
            let grid = HilbertGrid::for_map(map, n)?;
            let dp = qtorus::damped_propagator(map, q, &grid)?;
            let bytes = if save {
                let mut buf = Vec::new();
                qtorus::write_matrix(&mut buf, dp.v.as_ref())?;
                Some(buf)
            } else {
                None
            };
            Ok((spectra::propagator_spectrum(&dp)?, bytes))
        })
        .collect();
    let mut records = Vec::new();
    for r in out {
        let (rec, bytes) = r?;
        if let Some(b) = bytes {
            em.write(&format!("propagator_N{}.dlmx", rec.n()), &b)?;
        }
        em.csv(&format!("spectrum_N{}.csv", rec.n()), &rec.to_csv())?;
        records.push(rec);
    }
    Ok(records)
}

fn run_qmap_spectrum(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<()> {
    let map = cfg.map()?;
    let q = cfg.damping();
    let ns = cfg.n_list(&[256, 512]);
    let band_eps = cfg.band_eps.unwrap_or(spectra::DEFAULT_BAND_EPS);
    let asy = ctx.stage("asymptotics", |_| asymptotics_for(&map, &q))?;
    let records = ctx.stage("spectra", |em| {
        spectra_on_ladder(&map, &q, &ns, cfg.save_matrices.unwrap_or(false), em)
    })?;
    let conc_eps = cfg.concentration_eps.unwrap_or(0.1 * (asy.q_plus - asy.q_minus));
    let bands: Vec<_> = records
        .iter()
        .map(|r| (r.n(), spectra::band_check(r, asy.q_minus, asy.q_plus, band_eps)))
        .collect();
    let conc = spectra::concentration_histogram(&records, asy.q_bar, conc_eps);
    let residual = records.iter().map(|r| r.residual).fold(0.0, f64::max);
    let summary = json!({
        "asymptotics": asy,
        "band_eps": band_eps,
        "band": bands.iter().map(|(n, b)| json!({"n": n, "violations": b.violations, "gap": b.gap})).collect::<Vec<_>>(),
        "concentration": conc,
        "max_residual": residual,
    });
    ctx.stage("emit", |em| em.json("summary.json", &summary))?;
    let violations: usize = bands.iter().map(|b| b.1.violations).sum();
    ctx.check("band", violations == 0, format!("{violations} decay rates outside the band"));
    ctx.check("residual", residual < 1e-8, format!("max residual {residual:.3e}"));
    ctx.check(
        "concentration_monotone",
        conc.monotone,
        format!("fractions {:?}", conc.fractions),
    );
    Ok(())
}

fn run_fractal_weyl(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<()> {
    let map = cfg.map()?;
    let q = cfg.damping();
    let ns = cfg.n_list(&[64, 128, 256, 512]);
    let model = ctx.stage("orbit_sums", |_| PressureModel::new(&map, &q, thermo::DEFAULT_N_RANGE))?;
    let beta_grid = thermo::default_beta_grid();
    let table = ctx.stage("rate_function", |_| {
        let s_grid = model.default_s_grid(&beta_grid, 81);
        model.rate_function(&beta_grid, &s_grid)
    })?;
    let (q_plus, q_bar) = (table.domain.1, table.q_bar);
    let alpha = cfg
        .alpha
        .unwrap_or_else(|| q_bar + cfg.alpha_fraction.unwrap_or(0.3) * (q_plus - q_bar));
    let records = ctx.stage("spectra", |em| spectra_on_ladder(&map, &q, &ns, false, em))?;
    let report = ctx.stage("regression", |_| {
        spectra::fractal_weyl_regression(&records, alpha, &table, map.lambda().ln())
    })?;
    ctx.stage("emit", |em| {
        em.json("fractal_weyl.json", &report)?;
        em.csv("rate_function.csv", &table.to_csv())
    })?;
    ctx.check(
        "slope_bound",
        report.slope <= report.slope_bound + 0.15,
        format!("slope {:.4} vs bound {:.4} + 0.15", report.slope, report.slope_bound),
    );
    Ok(())
}

fn run_dispersion_paths(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<()> {
    let map = cfg.map()?;
    let q = cfg.damping();
    let ns = cfg.n_list(&[256, 512]);
    let j = cfg.j.unwrap_or(16);
    let steps = cfg.steps.unwrap_or(4);
    let (cx, cp) = cfg.center.unwrap_or((0.3, 0.7));
    let tol = cfg.prune_tol.unwrap_or(dispersion::PRUNE_TOL);
    let l = (j as f64).sqrt().round() as usize;
    let reports = ctx.stage("paths", |em| {
        let out: Vec<Result<dispersion::PathBoundReport>> = ns
            .par_iter()
            .map(|&n| {
                let grid = HilbertGrid::for_map(&map, n)?;
                let dp = qtorus::damped_propagator(&map, &q, &grid)?;
                let part = dispersion::build_partition(&grid, j, 1.0 / l.max(1) as f64)?;
                let e = qtorus::coherent_state(TorusPoint::new(cx, cp), &grid, 1.0).vector;
                dispersion::path_bound_check_with(&dp, &part, &map, &q, steps, &e, tol)
            })
            .collect();
        let mut reports = Vec::new();
        for r in out {
            let r = r?;
            em.json_gz(&format!("paths_N{}.json.gz", r.big_n), &r.rows)?;
            reports.push(r);
        }
        Ok(reports)
    })?;
    let pressure = ctx.stage("pressure_sum", |_| {
        dispersion::pressure_sum_check(&map, &q, j, cfg.pressure_steps.unwrap_or(steps))
    })?;
    let summary = json!({
        "j": j,
        "steps": steps,
        "per_n": reports.iter().map(|r| json!({
            "n": r.big_n,
            "paths": r.rows.len(),
            "fitted_c": r.fitted_c,
            "max_norm_over_b": r.max_over_b,
            "reconstruction_defect": r.reconstruction_defect,
            "pruned_bound": r.pruned_bound,
        })).collect::<Vec<_>>(),
        "pressure_sum": {
            "n": pressure.n,
            "lhs": pressure.lhs,
            "rhs": pressure.rhs,
            "raw_rate": pressure.raw_rate,
            "ratio_rate": pressure.ratio_rate,
            "pressure": pressure.pressure,
            "levels": pressure.levels,
        },
    });
    ctx.stage("emit", |em| em.json("summary.json", &summary))?;
    let defect = reports.iter().map(|r| r.reconstruction_defect).fold(0.0, f64::max);
    ctx.check("reconstruction", defect < 1e-8, format!("max defect {defect:.3e}"));
    let cs: Vec<f64> = reports.iter().map(|r| r.fitted_c).collect();
    let (cmin, cmax) = cs.iter().fold((f64::INFINITY, 0.0f64), |(a, b), c| (a.min(*c), b.max(*c)));
    ctx.check("c_stable", cmax <= 4.0 * cmin, format!("fitted C {cs:?}"));
    let diff = (pressure.raw_rate - pressure.pressure).abs();
    ctx.check(
        "pressure_rate",
        diff <= 0.05,
        format!(
            "(1/n) log sum = {:.4} vs P = {:.4} (ratio estimate {:.4})",
            pressure.raw_rate, pressure.pressure, pressure.ratio_rate
        ),
    );
    Ok(())
}

fn run_dispersion_projector(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<()> {
    let map = cfg.map()?;
    let q = cfg.damping();
    let seed = cfg.seed()?;
    let ns = cfg.n_list(&[128, 256, 512]);
    let eps = cfg.eps.unwrap_or(0.05);
    let hyp = ctx.stage("hyperbolicity", |_| classical::hyperbolicity(&map, 32, 20))?;
    let model = ctx.stage("orbit_sums", |_| PressureModel::new(&map, &q, thermo::DEFAULT_N_RANGE))?;
    let crit = ctx.stage("critical_level", |_| {
        dispersion::critical_level(&model, hyp.nu_min, hyp.lambda_max)
    })?;
    let alpha = cfg.alpha_level.unwrap_or(crit.alpha_c);
    let beta_grid = thermo::default_beta_grid();
    let h_alpha = model.legendre_inf(&beta_grid, alpha).min(0.0);
    let beta_alpha = thermo::beta_of_alpha(hyp.nu_min, hyp.lambda_max, h_alpha);
    let samples = cfg.samples.unwrap_or(200_000);
    let norm5_cap = cfg.norm5_cap.unwrap_or(1024);
    let rows = ctx.stage("projector_split", |_| {
        ns.iter()
            .map(|&n| {
                let grid = HilbertGrid::for_map(&map, n)?;
                let dp = qtorus::damped_propagator(&map, &q, &grid)?;
                let t = dispersion::EhrenfestTime::new(n, eps, hyp.lambda_max).t;
                let split = dispersion::projector_split(&dp, t, alpha)?;
                let volume = classical::deviation_volume_sym(&map, &q, t, alpha, samples, seed);
                let norm = split.dispersion_norm()?;
                let norm5 = if n <= norm5_cap { Some(split.norm5()?) } else { None };
                Ok(json!({
                    "n": n,
                    "t": t,
                    "polar_defect": split.polar_defect(),
                    "rank_fraction": split.rank_plus() as f64 / n as f64,
                    "deviation_volume": volume,
                    "a_minus_norm": split.a_minus_norm(),
                    "dispersion_norm": norm,
                    "norm5": norm5,
                }))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            let v = r["dispersion_norm"].as_f64()?;
            let n = r["n"].as_f64()?;
            (v > 0.0).then(|| (n.ln(), v.ln()))
        })
        .collect();
    let exponent = if pts.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        -spectra::least_squares(&x, &y).0
    } else {
        f64::INFINITY
    };
    let target = beta_alpha / hyp.lambda_max;
    let summary = json!({
        "critical_level": crit,
        "alpha_level": alpha,
        "beta_alpha": beta_alpha,
        "exponent": exponent,
        "exponent_target": target,
        "per_n": rows,
    });
    ctx.stage("emit", |em| em.json("summary.json", &summary))?;
    let polar = rows.iter().filter_map(|r| r["polar_defect"].as_f64()).fold(0.0, f64::max);
    ctx.check("polar", polar <= 1e-8, format!("max polar defect {polar:.3e}"));
    let rank_gap = rows
        .iter()
        .filter_map(|r| Some((r["rank_fraction"].as_f64()? - r["deviation_volume"].as_f64()?).abs()))
        .fold(0.0, f64::max);
    ctx.check("rank_volume", rank_gap <= 0.1, format!("max |rank/N - volume| {rank_gap:.4}"));
    ctx.check(
        "exponent",
        exponent >= target - 0.2,
        format!("fitted exponent {exponent:.4} vs beta/lambda - 0.2 = {:.4}", target - 0.2),
    );
    let mut ok = true;
    let mut detail = Vec::new();
    for r in &rows {
        if let (Some(total), Some(t)) = (r["norm5"]["total"].as_f64(), r["t"].as_f64()) {
            let bound = (2.0 * t * (crit.q_plus - crit.gamma)).exp();
            ok &= total <= bound;
            detail.push(format!("N={}: {total:.3e} <= {bound:.3e}", r["n"]));
        }
    }
    ctx.check("norm_bound", ok, detail.join(", "));
    Ok(())
}

fn run_dwe(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<()> {
    let seed = cfg.seed()?;
    let profile = match &cfg.profile {
        Some(p) => p.clone(),
        None => DampingProfile::cosine(1, 0.4, 0.4)?,
    };
    let k = cfg.k.unwrap_or(32);
    let gen = ctx.stage("assemble", |_| wave::assemble_generator(&profile, k))?;
    let spec = ctx.stage("spectrum", |_| wave::wave_spectrum(&gen))?;
    let gap = spec.gap();
    let gcc_time = cfg.gcc_time.unwrap_or(200.0);
    let gcc = ctx.stage("gcc_scan", |_| {
        wave::gcc_scan(&profile, gcc_time, cfg.directions.unwrap_or(64), cfg.offsets.unwrap_or(64))
    })?;
    let t_final = cfg.t_final.unwrap_or(100.0);
    let steps = cfg.time_steps.unwrap_or(500);
    let t_grid: Vec<f64> = (0..=steps).map(|i| t_final * i as f64 / steps as f64).collect();
    let trace = ctx.stage("evolve", |_| {
        let data = wave::WaveState::random(&gen, cfg.regularity.unwrap_or(0.0), seed);
        wave::evolve(&gen, &data, &t_grid)
    })?;
    let fit = ctx.stage("decay_fit", |_| wave::decay_fit(&trace, gap, gcc.a_minus_estimate))?;
    let strip = spec.strip_violations(profile.a_min(), profile.a_max(), 1e-6);
    let symmetry = spec.symmetry_defect();
    let summary = json!({
        "truncation": k,
        "modes": spec.modes.len(),
        "strip": [profile.a_min(), profile.a_max()],
        "strip_violations": strip,
        "symmetry_defect": symmetry,
        "zero_distance": spec.zero_distance(),
        "gap": gap,
        "gcc": gcc,
        "decay_fit": fit,
        "residual": spec.residual,
    });
    ctx.stage("emit", |em| {
        em.csv("wave_spectrum.csv", &spec.to_csv())?;
        em.csv("energy.csv", &trace.to_csv())?;
        em.json("summary.json", &summary)
    })?;
    ctx.check("strip", strip == 0, format!("{strip} eigenvalues outside the strip"));
    ctx.check("symmetry", symmetry <= 1e-8, format!("symmetry defect {symmetry:.3e}"));
    let rel = (fit.gamma_fit - fit.gamma_pred).abs() / fit.gamma_pred.abs().max(1e-300);
    ctx.check(
        "decay_rate",
        rel <= 0.1,
        format!("fit {:.4} vs min(G, a-) = {:.4}", fit.gamma_fit, fit.gamma_pred),
    );
    ctx.check("gcc", gcc.gcc, format!("min average {:.4e}", gcc.min_average));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collects_every_violation() {
        let err = parse_config(r#"{"experiment": "dwe", "gama": 1, "n_list": [0]}"#).unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert!(list.iter().any(|m| m.contains("\"gama\"")));
        assert!(list.iter().any(|m| m.contains("seed")));
        assert!(list.iter().any(|m| m.contains("positive")));
    }

    #[test]
    fn unknown_experiment_is_named() {
        let err = parse_config(r#"{"experiment": "billiard"}"#).unwrap_err();
        assert!(err.to_string().contains("billiard"));
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse_config(r#"{"experiment": "qmap_spectrum", "n_list": [64]}"#).unwrap();
        assert_eq!(cfg.output_dir, "out");
        assert!(cfg.seed.is_none());
        assert_eq!(cfg.map().unwrap().matrix(), [2, 1, 1, 1]);
    }
}
