use thiserror::Error;

/// Errors produced by the registration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular transform (|det A| = {det:e})")]
    SingularTransform { det: f64 },

    #[error("transform has no real principal matrix logarithm")]
    NoRealLogarithm,

    #[error("Karcher mean did not converge after {iterations} iterations (update norm {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("covariance matrix is ill-conditioned")]
    IllConditioned,

    #[error("location {0:?} lies outside the neighbor library")]
    OutOfLibraryBounds(Vec<f64>),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("non-positive scale parameter: {0:e}")]
    NonPositiveScale(f64),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("invariant audit failed: {0}")]
    AuditFailed(String),

    #[error("sweep {iteration} failed: {source}")]
    Sweep { iteration: u64, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) => 2,
            Error::AuditFailed(_) => 4,
            Error::Io(_) | Error::Format { .. } => 2,
            Error::Sweep { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
