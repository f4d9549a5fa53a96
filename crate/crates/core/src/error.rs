use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vector is not in the tangent space (block {block} sums to {sum:e})")]
    NotTangent { block: usize, sum: f64 },

    #[error("non-positive entry {value:e} at index {index}")]
    NonPositive { index: usize, value: f64 },

    #[error("Krylov approximation did not converge after {restarts} restarts (estimate {estimate:e})")]
    KrylovNonConvergence { restarts: usize, estimate: f64 },

    #[error("dense path requested for N = {n} above the configured limit {limit}")]
    DenseLimitExceeded { n: usize, limit: usize },

    #[error("Cholesky factorization failed after jitter {jitter:e}")]
    CholeskyFailed { jitter: f64 },

    #[error("loss {0} is not differentiable")]
    NotDifferentiable(&'static str),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::NotTangent { .. } => "tangent",
            Error::NonPositive { .. } => "domain",
            Error::KrylovNonConvergence { .. } => "krylov",
            Error::DenseLimitExceeded { .. } => "dense-limit",
            Error::CholeskyFailed { .. } => "cholesky",
            Error::NotDifferentiable(_) => "loss",
            Error::NonFinite(_) => "non-finite",
            Error::Diverged(_) => "diverged",
            Error::Format(_) => "format",
            Error::Checksum(_) => "checksum",
            Error::Empty(_) => "empty",
            Error::Io(_) => "io",
        }
    }
}
