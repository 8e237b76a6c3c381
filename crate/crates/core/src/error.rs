use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("convexity violation: {0}")]
    ConvexityViolation(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    /// The thinning envelope fell below the true rate at a candidate time.
    #[error("envelope violation at t={time}: rate {rate} exceeds envelope {envelope}")]
    EnvelopeViolation { time: f64, rate: f64, envelope: f64 },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("problem too large: {0}")]
    Size(String),

    #[error("quadratic program failed: {0}")]
    QpFailure(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("integration failed: {0}")]
    Integration(String),
}
