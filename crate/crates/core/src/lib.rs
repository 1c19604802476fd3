//! Backfilling of censored diffusion time series.
//!
//! The pipeline runs a forward filter on the densely observed window,
//! reverses the filter dynamics in time and simulates the reversed process
//! back over the missing history. Realized historical ticks can be imposed
//! through Gaussian bridges.
//!
//! Modules, bottom-up:
//! - [`sde`]: time grids, time-varying matrices, Euler–Maruyama simulation
//!   of the linear signal/observation system, Gaussian densities.
//! - [`censor`]: Poisson tick times and the censoring map.
//! - [`filter`]: Kalman–Bucy filter, Riccati integration, calibration.
//! - [`nonlinear`]: 1-D grid filter for general scalar diffusions.
//! - [`reversal`]: time-reversed linear-Gaussian filter dynamics.
//! - [`conditioning`]: anchor-conditioned bridges, interpolation relaxation
//!   and the Girsanov relative-entropy estimate.

pub mod censor;
pub mod conditioning;
mod error;
pub mod filter;
pub mod nonlinear;
pub mod reversal;
pub mod sde;

pub use error::{Error, Result};
