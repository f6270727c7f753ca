//! Experiment driver: configuration files, ensemble runs, sweeps and their
//! CSV, JSON and SVG artifacts.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 failed verdict
//! under `--strict`, 3 integrator divergence.

pub mod config;
pub mod run;
pub mod svg;

use std::path::Path;

pub use config::{ControllerSpec, Experiment, ExperimentConfig, InitialState, Scenario};
pub use run::{fitted_decay_rate, run, sweep, RunReport, SweepParam, SweepRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Diverged(qnd_core::Error),
    #[error("verdict failed: {0}")]
    Verdict(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Verdict(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}
