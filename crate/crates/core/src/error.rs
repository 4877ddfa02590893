use thiserror::Error;

/// Errors raised by the numerical layers of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (failed at pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("input {value} outside the kernel domain [0, 1]")]
    DomainError { value: f64 },

    #[error("invalid rank {0}: must be at least 1")]
    InvalidRank(usize),

    #[error("dense oracle capped at {cap} points, got {n}")]
    CapExceeded { n: usize, cap: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("model validation failed: {0}")]
    Validation(crate::model::ValidationReport),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
