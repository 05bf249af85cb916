//! Config-driven experiment pipelines over the `wmplanlab` library.
//!
//! Every command is a pure function of the config file, the `--set`
//! overrides and the seed; reports are written as JSON and CSV under the
//! configured output directory.

pub mod commands;
pub mod config;

use std::fmt;

pub use commands::{dir_hash, run, Command, Options, Outcome};
pub use config::{load, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration, including missing inputs.
    Config(String),
    Core(wmplanlab::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<wmplanlab::Error> for CliError {
    fn from(e: wmplanlab::Error) -> Self {
        match e {
            wmplanlab::Error::Config(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 for configuration errors, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(wmplanlab::Error::EmptyDataset | wmplanlab::Error::DatasetTooShort { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}
