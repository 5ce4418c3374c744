//! `lpgflow` command-line tools: synthetic data generation, training,
//! sampling, evaluation and checkpoint inspection.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod sample;
pub mod train;

pub use commands::run;
pub use error::{exit, CliError};
