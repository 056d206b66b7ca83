use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid stride, padding or similar operator parameter.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input outside the domain of a function (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or unsupported file content.
    #[error("format error: {0}")]
    Format(String),

    /// The optimization diverged; the message carries the diagnostic.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the failure is numerical (divergence, NaN) rather than a bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence(_) | Error::Numeric(_))
    }
}
