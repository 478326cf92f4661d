//! Command-line front end: CSV ingestion, option resolution and reports for
//! the `fit`, `rank`, `simulate`, `test-zerosum` and `forecast` workflows.

pub mod config;
pub mod data;
pub mod report;
mod run;

use std::path::PathBuf;
use thiserror::Error;

pub use config::{resolve, Invocation, OutputFormat, RunConfig};
pub use data::{parse_csv, parse_csv_reader, ParseError};
pub use run::{execute, run};

/// Errors surfaced to the user, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] sparsecoint::Error),

    #[error(transparent)]
    Args(#[from] clap::Error),
}

impl CliError {
    /// 0 for help and version output, 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Args(e) if !e.use_stderr() => 0,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
