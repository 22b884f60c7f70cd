//! Library side of the `plvio` command-line tool.

pub mod commands;
pub mod config;
pub mod output;
pub mod replay;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running or writing results; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<plvio::Error> for CliError {
    fn from(e: plvio::Error) -> Self {
        match e {
            plvio::Error::Config(_) | plvio::Error::Parse { .. } | plvio::Error::TimeOrder(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
