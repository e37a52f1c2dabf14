use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: max |C - C'| entry {max_asymmetry:.3e} exceeds {tolerance:.1e}")]
    NotSymmetric { max_asymmetry: f64, tolerance: f64 },

    #[error("matrix is not positive definite (a leading minor is <= 0)")]
    NotPositiveDefinite,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("tensor quadrature supports dimension <= 3, got {0}")]
    UnsupportedDimension(usize),

    #[error("normalization weight must be positive and finite, got {0}")]
    NonPositiveWeight(f64),

    #[error("log-log rate fit requires strictly positive finite values, got {0}")]
    NonPositiveValue(f64),

    #[error("grid too coarse: density mass {mass:.6} deviates from 1 by more than {tolerance:.1e}")]
    GridTooCoarse { mass: f64, tolerance: f64 },

    #[error("ill-conditioned precision matrix: condition estimate {0:.3e} exceeds 1e12")]
    IllConditioned(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
