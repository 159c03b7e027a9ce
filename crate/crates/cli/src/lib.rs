//! Configuration, orchestration and reporting for branching-process
//! verification experiments.

pub mod catalog;
pub mod config;
pub mod experiment;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, ExperimentReport, RunError, RunOptions};
