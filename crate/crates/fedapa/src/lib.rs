//! Experiment runner, file formats and command-line front end for the
//! `fedapa-core` simulator.

pub mod config;
pub mod csv_io;
pub mod runner;
pub mod summary;

pub use config::{ConfigError, ExperimentConfig};
pub use runner::{run_experiment, Parallel, RunError, RunOutcome, RunSummary};
