//! Experiment runner: TOML configs with sweeps and variants, per-run
//! output directories, and across-seed comparisons.

pub mod compare;
pub mod config;
pub mod output;
pub mod runner;

use std::path::Path;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use runner::{run, ResultRow, RunOptions, RunSummary};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("{0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("no rows for {0:?} in results")]
    MissingGroup(String),

    #[error(transparent)]
    Core(#[from] robustlab::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}
