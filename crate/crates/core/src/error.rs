//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,

    #[error("matrix is not positive definite after jitter escalation")]
    NotPositiveDefinite,

    #[error("lengthscales must be strictly positive")]
    NonPositiveLengthscale,

    #[error("inducing inputs contain (near-)duplicate rows")]
    DuplicateInducingInputs,

    #[error("batch contains no data rows")]
    EmptyBatch,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("dataset has no observed entries")]
    NoObservedEntries,

    #[error("output {0} is degenerate: {1}")]
    DegenerateOutput(usize, String),

    #[error("degenerate covariance at grid point {0}")]
    DegenerateCovariance(usize),

    #[error("parameter vector has {got} entries but the layout expects {expected}")]
    LayoutMismatch { expected: usize, got: usize },

    #[error("non-finite {quantity} in segment `{segment}`")]
    NonFinite { quantity: String, segment: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
