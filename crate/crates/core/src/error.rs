use thiserror::Error;

/// Errors raised anywhere in the fast/dense MTGP pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index {index} is outside the supported range (limit {limit})")]
    IndexOutOfRange { index: u64, limit: u64 },

    #[error("dimension {requested} exceeds the shipped table size {available}")]
    DimensionTooLarge { requested: usize, available: usize },

    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("task sizes must be non-increasing after ordering, got {0:?}")]
    SizesNotDescending(Vec<usize>),

    #[error("kernel family does not match the design's sequence family")]
    FamilyMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("task index {task} out of range for {tasks} tasks")]
    TaskOutOfRange { task: usize, tasks: usize },

    #[error("Schur complement broke down at stage {stage}: min real part {min_real:e}")]
    SchurBreakdown { stage: usize, min_real: f64 },

    #[error("imaginary residue {0:e} exceeds tolerance (inconsistent spectrum)")]
    ImaginaryResidue(f64),

    #[error("Cholesky factorization failed after jitter escalation (final noise {0:e})")]
    CholeskyFailed(f64),

    #[error("singular {0}x{0} system")]
    SingularSystem(usize),

    #[error("dense path capped at N = {cap}, requested N = {n}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("kernel is not integral-normalized; cubature requires a zero-mean base kernel")]
    NotIntegralNormalized,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
