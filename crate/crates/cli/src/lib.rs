//! Experiment driver for dynamic data pruning: synthetic data generation,
//! single finetuning runs, scorer x ratio x seed sweeps, and theory-check
//! reports.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

use std::fmt;
use std::path::Path;

pub use config::{ExperimentConfig, Overrides};

/// Failure classes, each with its own process exit status.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or unreadable input data.
    Config(String),
    /// A training run or sweep cell failed, or a result file could not be
    /// written.
    Run(String),
    /// Theory checks that did not hold.
    Verify(Vec<String>),
}

impl CliError {
    pub const CONFIG_EXIT: i32 = 2;
    pub const RUN_EXIT: i32 = 3;
    pub const VERIFY_EXIT: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::CONFIG_EXIT,
            CliError::Run(_) => Self::RUN_EXIT,
            CliError::Verify(_) => Self::VERIFY_EXIT,
        }
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Run(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "run failed: {m}"),
            CliError::Verify(failed) => write!(f, "verify failed: {}", failed.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dynprune_core::Error> for CliError {
    fn from(e: dynprune_core::Error) -> Self {
        use dynprune_core::Error as E;
        match e {
            E::Csv { .. } | E::Io { .. } | E::CsvCell { .. } | E::UnknownLabel { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Run(other.to_string()),
        }
    }
}
