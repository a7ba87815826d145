//! Command-line runner: configuration, seed plumbing and run directories.

pub mod commands;
pub mod config;

use lot_core::LotError;
use thiserror::Error;

pub use commands::{dispatch, execute, Command, Invocation, Report};
pub use config::{parse_config, resolve, RawConfig, Resolved};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(#[from] LotError),
    #[error("verdict failed: {0}")]
    Verdict(String),
}

impl CliError {
    /// 1 for run failures, 2 for configuration errors, 3 for failed verdicts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Verdict(_) => 3,
        }
    }
}
