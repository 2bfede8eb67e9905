//! Experiment runner for the particle solver: configs, file formats and the CLI backend.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;

pub use config::RawConfig;
pub use error::CliError;
pub use experiment::{run, RunOptions};
