use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Cholesky factorization failed even at the maximum jitter level.
    #[error("matrix not positive definite (last jitter tried: {jitter:.3e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("system adapter failed: {0}")]
    Adapter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }
}
