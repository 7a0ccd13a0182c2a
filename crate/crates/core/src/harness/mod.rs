//! Experiment orchestration and the command-line interface.

pub mod cli;
pub mod config;
pub mod experiment;

pub use cli::cli_run;
pub use config::{DataSource, EvalTarget, ExperimentConfig};
pub use experiment::{run_experiment, Manifest, RunRecord};
