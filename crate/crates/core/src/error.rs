//! Error types shared across the library.

use thiserror::Error;

/// Errors raised by simulation, linear algebra and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A Gram matrix was numerically rank deficient (condition number above
    /// the guard threshold, or a positive-definite factorization failed).
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    /// The per-step batch size floor(n / K) came out as zero.
    #[error("batch too small: n = {n}, local steps = {k}")]
    BatchTooSmall { n: usize, k: usize },

    /// Converged local updates are undefined at p = n.
    #[error("boundary dimension p = n = {0} is not supported")]
    BoundaryDimension(usize),

    /// The model dimension falls in the band around the sample counts where
    /// neither the over- nor the under-parameterized expression applies.
    #[error("p = {p} lies in the uncovered band [{min_n} - 1, {max_n} + 1]")]
    RegimeGap { p: usize, min_n: usize, max_n: usize },

    /// A heterogeneity schedule that cannot be realized (for example a single
    /// client with a nonzero zero-sum norm).
    #[error("impossible heterogeneity schedule: {0}")]
    ImpossibleSchedule(String),

    /// Dimensions violate a closed-form expectation's validity constraints.
    #[error("dimension violation: {0}")]
    DimensionViolation(String),

    /// A configuration failed validation; the report lists every violation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
