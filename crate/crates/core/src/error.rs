use thiserror::Error;

/// Errors produced by the tuning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("Riccati recursion did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("covariance matrix is not positive definite")]
    IllConditioned,

    #[error("parameter vector {0:?} lies outside the design domain")]
    OutOfDomain(Vec<f64>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
