//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite; jitter ladder exhausted (tried {attempted:?})")]
    NotPositiveDefinite { attempted: Vec<f64> },

    #[error("singular triangular matrix: zero diagonal at index {index}")]
    SingularMatrix { index: usize },

    #[error("bag label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("class {class} has {available} bags but the split needs at least {needed}")]
    Stratification {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable machine-readable class tag, one per variant.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NotPositiveDefinite { .. } => "not-positive-definite",
            Error::SingularMatrix { .. } => "singular-matrix",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::NonFiniteGradient { .. } => "non-finite-gradient",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Stratification { .. } => "stratification",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
