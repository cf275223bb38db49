//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Geometry that cannot support the requested computation (zero distance,
    /// coincident points, non-orthonormal frame).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A numerical routine failed or exceeded its accuracy budget.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Invalid experiment or run configuration; the message names the field.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
