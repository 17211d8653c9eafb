use thiserror::Error;

/// Errors produced by the library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation, e.g. `gamma * sigma >= 1`.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    /// An SGD iterate left the finite region; `step` is the 1-based iteration index.
    #[error("iteration diverged at step {step} (norm {norm:e})")]
    Diverged { step: usize, norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
