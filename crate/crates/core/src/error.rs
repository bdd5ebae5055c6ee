//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by simulator components.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("iteration did not converge: {0}")]
    Convergence(String),

    #[error("numerical abort at iteration {iteration}: {detail}")]
    NumericalAbort { iteration: usize, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("representation is non-conforming: {0}")]
    NonConforming(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
