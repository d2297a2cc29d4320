use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Not enough samples for the requested lag structure.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is not positive definite after jitter: {0}")]
    NotPositiveDefinite(String),

    #[error("random model generation could not reach a stable draw after {retries} rescalings")]
    UnstableModel { retries: usize },

    #[error("vector lies outside the range of a singular kernel (residual {residual:.3e})")]
    OutsideKernelRange { residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the inputs rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::InsufficientData(_)
        )
    }
}
