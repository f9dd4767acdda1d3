//! Error taxonomy shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument is outside its legal range (e.g. non-positive temperature).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two tensors/vectors that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A domain-type invariant does not hold (e.g. a probability vector that
    /// does not sum to one).
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    /// Bad run configuration (unknown key, inconsistent variant/mode, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or truncated data file. `offset` is the byte offset at which
    /// the problem was detected.
    #[error("ingestion error at byte offset {offset}: {message}")]
    Ingestion { offset: u64, message: String },

    /// A teacher-logit cache does not match the dataset it is used with.
    #[error("stale cache: {0}")]
    StaleCache(String),

    /// A structurally inconsistent snapshot/tree (dangling source reference, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::InvariantViolation(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
