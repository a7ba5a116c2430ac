use thiserror::Error;

/// Errors raised across the lab. Each variant maps onto one CLI exit class.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("refusing to run: {0}")]
    Resource(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn index(what: impl Into<String>) -> Self {
        LabError::Index(what.into())
    }

    pub fn shape(what: impl Into<String>) -> Self {
        LabError::Shape(what.into())
    }

    pub fn domain(what: impl Into<String>) -> Self {
        LabError::Domain(what.into())
    }

    pub fn usage(what: impl Into<String>) -> Self {
        LabError::Usage(what.into())
    }

    pub fn invalid(what: impl Into<String>) -> Self {
        LabError::Invalid(what.into())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
