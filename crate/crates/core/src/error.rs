use thiserror::Error;

/// Errors raised by the sampler library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration cap exceeded: {required} states needed, cap is {cap}")]
    StateCapExceeded { required: u128, cap: u64 },

    #[error("completion cap exceeded: {required} completions needed, cap is {cap}")]
    CompletionCapExceeded { required: u128, cap: u64 },

    #[error("non-finite weight in trajectory {index}")]
    NonFiniteWeight { index: usize },

    #[error("non-finite loss at step {step}: {summary}")]
    NonFiniteLoss { step: usize, summary: String },

    #[error("per-step jump probability {total:.6} exceeds 1 at t={t:.6}; decrease K or increase eps")]
    JumpProbabilityOverflow { t: f64, total: f64 },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("sample dump format error: {0}")]
    DumpFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
