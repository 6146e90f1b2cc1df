//! Experiment runner for the `moffo` optimizer.

pub mod baselines;
pub mod commands;
pub mod config;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => commands::EXIT_CONFIG,
            CliError::Runtime(_) => commands::EXIT_RUNTIME,
        }
    }
}
