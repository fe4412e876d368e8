//! Library side of the `ratplus` command: run configuration, the oracle
//! suite and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod equiv;

use std::fmt;

pub use config::RunConfig;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation(String),
    Oracle(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Oracle(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Oracle(m) => write!(f, "oracle failure: {m}"),
            CliError::Runtime(m) => write!(f, "runtime fault: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ratplus_core::Error> for CliError {
    fn from(e: ratplus_core::Error) -> Self {
        use ratplus_core::Error as E;
        match e {
            E::ShapeMismatch { .. }
            | E::Empty { .. }
            | E::InvalidArgument { .. }
            | E::OutOfOrder { .. }
            | E::OverlappingSegments(_)
            | E::SpecMismatch(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
