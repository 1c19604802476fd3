use thiserror::Error;

/// Errors reported by the backfilling library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} is not symmetric positive definite")]
    NotPositiveDefinite { what: &'static str },

    #[error("observation noise matrix is ill-conditioned at t={time} (condition number {condition:e})")]
    IllConditioned { time: f64, condition: f64 },

    #[error("Riccati solution lost positive semi-definiteness at t={time} (min eigenvalue {min_eigenvalue:e})")]
    RiccatiUnstable { time: f64, min_eigenvalue: f64 },

    #[error("time step {dt:e} violates the explicit stability bound; use dt <= {suggested_dt:e}")]
    StabilityBound { dt: f64, suggested_dt: f64 },

    #[error("grid filter diverged at t={time}: total mass {mass:e}")]
    FilterDivergence { time: f64, mass: f64 },

    #[error("reversal undefined at t={time}, x={x}: density {density:e} below floor")]
    ReversalUndefined { time: f64, x: f64, density: f64 },

    #[error("filter law covariance is singular at t={time}")]
    SingularCovariance { time: f64 },

    #[error("anchor {index} at t={time} is unreachable: transition covariance is singular")]
    UnreachableAnchor { index: usize, time: f64 },

    #[error("grid step {dt:e} too coarse to separate anchors; need dt <= {required_dt:e}")]
    StepTooCoarse { dt: f64, required_dt: f64 },

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
