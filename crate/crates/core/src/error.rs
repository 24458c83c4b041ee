//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, tensor ops and sampling.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar or structural parameter is out of its legal range.
    #[error("parameter error: {field}: {detail}")]
    Parameter { field: &'static str, detail: String },

    /// Input values violate a contract (e.g. a mask that is not binary).
    #[error("value error: {0}")]
    Value(String),

    /// Internal bookkeeping is inconsistent (e.g. a parameter registered twice).
    #[error("integrity error: {0}")]
    Integrity(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn parameter(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            field,
            detail: detail.into(),
        }
    }
}
