use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, unsupported version, or otherwise unparseable header.
    #[error("format error: {0}")]
    Format(String),

    /// Header parsed but the payload is truncated or has trailing bytes.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// A Cholesky pivot was not strictly positive.
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("covariance factorization failed after ridge escalation to {lambda:e}")]
    Conditioning { lambda: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: u64, loss: f64 },

    /// A non-finite value appeared at the named stage of a computation.
    #[error("non-finite value in {stage}")]
    Numeric { stage: &'static str },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape { expected, actual });
    }
    Ok(())
}
