//! Error families shared across the workspace.
//!
//! Each variant maps to one documented CLI exit code (see the `corticode`
//! binary). Keep the families coarse: callers match on the family, not on
//! message text.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration value violates a precondition.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An index (stimulus, subject, dataset) is outside the owning world.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Tensor or token shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A loss became non-finite during optimization.
    #[error("divergence detected at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    /// A checkpoint was produced under a different configuration.
    #[error("config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    /// Pair sampling policy is not a probability vector.
    #[error("invalid pair policy: {0}")]
    InvalidPolicy(String),

    /// The corpus cannot produce a pair under the requested policy.
    #[error("no pair available: {0}")]
    NoPairAvailable(String),

    /// Rescaling statistics are missing for a dataset.
    #[error("missing rescale stats for dataset {0}")]
    MissingStats(usize),

    /// A metric input is degenerate (constant map, empty bank, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Too few samples or labels for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A gradient evaluated to a non-finite value.
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    /// An ablation name is not recognized.
    #[error("unknown ablation: {0}")]
    UnknownAblation(String),

    /// Filesystem or serialization failure.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Io(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
