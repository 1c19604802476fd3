//! Batch tool around `backfill-core`: simulate censored scenarios, run the
//! filter, backfill the missing history and score the result.

pub mod baselines;
pub mod commands;
pub mod config;
mod error;
pub mod evaluate;
pub mod io;
pub mod pipeline;

pub use error::{CliError, Result};
