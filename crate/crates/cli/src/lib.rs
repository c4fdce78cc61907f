//! Library half of the `sigllm` binary: configuration resolution,
//! detection records, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod record;

use std::fmt;

/// Command failures, each mapped to a distinct process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file, or a configuration the data cannot
    /// support. Exit code 2.
    Config(String),
    /// The model endpoint failed past the retry budget. Exit code 3.
    Backend(String),
    /// Unreadable or malformed input files. Exit code 4.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Backend(msg) => write!(f, "backend failure: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}
