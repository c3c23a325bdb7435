use thiserror::Error;

/// Errors raised while building model structures or evaluating fits.
///
/// Non-convergence of an iterative fit is *not* an error: it is reported
/// through the `converged` flag and diagnostics of the fit result.
#[derive(Error, Debug, Clone)]
pub enum Error {
    #[error("invalid table dimensions: {0}")]
    InvalidDimensions(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("invalid count vector: {0}")]
    InvalidCounts(String),

    #[error("marginal probability {value:.3e} at row {index} is below the conditioning floor 1e-12")]
    MarginTooSmall { index: usize, value: f64 },

    #[error("probability vector has entries on the boundary (min {min:.3e}); the estimate may not exist")]
    BoundaryProbability { min: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{what} is rank deficient: expected rank {expected}, found {found}")]
    RankDeficient {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("parameterization is not complete: {}", violations.join("; "))]
    IncompleteSpec { violations: Vec<String> },

    #[error("margins are not listed in non-decreasing inclusion order: {0}")]
    MarginOrder(String),

    #[error("design matrix is collinear; deficient columns: {columns:?}")]
    Collinear { columns: Vec<usize> },

    #[error("dimension mismatch for {what}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("operation requires the default canonical basis: {0}")]
    RequiresDefaultBasis(String),

    #[error("inversion of the parameterization failed: {0}")]
    InversionFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
