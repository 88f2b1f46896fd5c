use opehf_diff::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("line {line}: {msg}")]
    Load { line: usize, msg: String },

    #[error("trajectory {trajectory}, step {step}: behavior probability is zero for the logged action")]
    ZeroBehaviorProb { trajectory: usize, step: usize },

    #[error("discount^(T-1) = {0:e} underflows")]
    Underflow(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("neighbor pool holds {have} eligible entries, {need} requested")]
    PoolTooSmall { need: usize, have: usize },

    #[error("input has zero variance")]
    ConstantInput,

    #[error("maximum true value is zero")]
    ZeroMaxTruth,

    #[error("model has not been trained")]
    Untrained,

    #[error("missing {0}")]
    Missing(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, Error>;
