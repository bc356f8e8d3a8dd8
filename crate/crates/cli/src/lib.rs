//! Library side of the pipeline CLI: configuration, dataset formats, the
//! collect/relabel/train/eval commands, and the acceptance suite behind
//! `ohio check`.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod dataset;

use thiserror::Error;

/// Errors mapped onto process exit codes: usage = 1, data = 2, numeric = 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) | CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn from_learn(e: ohio_core::learn::LearnError) -> Self {
        use ohio_core::learn::LearnError::*;
        match e {
            EmptyDataset | Incompatible(_) => CliError::Data(e.to_string()),
            NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            Env(_) | Type(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<ohio_core::envs::EnvError> for CliError {
    fn from(e: ohio_core::envs::EnvError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ohio_core::relabel::RelabelError> for CliError {
    fn from(e: ohio_core::relabel::RelabelError) -> Self {
        use ohio_core::relabel::RelabelError::*;
        match &e {
            Inversion(_) | Lp(_) | Control(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ohio_core::lp::LpError> for CliError {
    fn from(e: ohio_core::lp::LpError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

/// Seed override from the environment; malformed values are a usage error.
pub fn env_seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var("OHIO_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("OHIO_SEED must be an integer, got '{text}'"))),
        Err(_) => Ok(None),
    }
}
