//! Experiment orchestration for the `pimlosc` command-line tool: config
//! files, end-to-end runs, sweeps and reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{run_experiment, RunRecord, Stage, StageError};
