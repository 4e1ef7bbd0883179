use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid torus map: {0}")]
    InvalidMap(String),

    #[error("observable is not real: coefficient {k:?} is not the conjugate of {neg:?}")]
    NonHermitianObservable { k: (i32, i32), neg: (i32, i32) },

    #[error("unstable direction did not converge after {iterations} iterations (defect {defect:.3e})")]
    UnstableDirection { iterations: usize, defect: f64 },

    #[error("periodic orbit enumeration for period {n} exceeds the cap {cap}")]
    OrbitCap { n: usize, cap: usize },

    #[error("operation requires a linear map")]
    LinearOnly,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("N = {n} violates the quantization parity condition for this map; admissible N: {admissible}")]
    Parity { n: usize, admissible: String },

    #[error("unsupported cat map quantization: {0}")]
    UnsupportedQuantization(String),

    #[error("matrix of size {n} exceeds the dense cap {cap}")]
    DenseCap { n: usize, cap: usize },

    #[error("eigensolver failed (matrix sha256 {hash})")]
    Eigensolver { hash: String },

    #[error("rank-deficient matrix in polar decomposition (smallest singular value {sigma_min:.3e})")]
    RankDeficient { sigma_min: f64 },

    #[error("partition: {0}")]
    Partition(String),

    #[error("regression: {0}")]
    Regression(String),

    #[error("condition0 fails everywhere: beta(alpha) - (q_plus - alpha) has no sign change on ({lo}, {hi})")]
    Condition0 { lo: f64, hi: f64 },

    #[error("damping profile: {0}")]
    Damping(String),

    #[error("wave data: {0}")]
    WaveData(String),

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    // the cause is part of the message, so it is not exposed as a source too
    #[error("stage {stage}: {cause}")]
    Stage { stage: String, cause: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
