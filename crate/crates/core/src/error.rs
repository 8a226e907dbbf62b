use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (largest jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("variance must be strictly positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("all feature rows coincide; cannot place {0} distinct inducing points")]
    DegenerateFeatures(usize),

    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    InvalidLabel {
        row: usize,
        label: f64,
        num_classes: usize,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonPositiveVariance(_)
                | Error::Domain(_)
                | Error::DegenerateFeatures(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
