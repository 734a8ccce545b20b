use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BpoError {
    /// An argument fell outside the domain of a function, e.g. a non-positive ratio.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A generator, ratio or policy specification is not valid.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Enumeration would exceed the enumerability guard.
    #[error("enumeration size {size} exceeds the guard of {limit}")]
    Guard { size: u128, limit: u128 },

    /// A loss, ratio or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("serialization: {0}")]
    Serde(String),
}

impl BpoError {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        BpoError::Domain {
            op,
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for BpoError {
    fn from(e: serde_json::Error) -> Self {
        BpoError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BpoError>;
