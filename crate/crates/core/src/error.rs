//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed an invalid argument (bad axis, shape mismatch, bad config).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numeric contract was violated (non-finite values, zero-norm truth).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or inconsistent data (bad file payloads, channel mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted; names the sample that produced a non-finite loss.
    #[error("training aborted: non-finite loss on sample '{sample}' at step {step}")]
    TrainAborted { sample: String, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
