//! Batch front-end: dataset generation, index builds, queries, benchmark
//! sweeps and artifact inspection.

pub mod bench;
pub mod commands;
pub mod config;

use std::path::Path;

use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unknown keys, invalid parameter combinations. Exit 1.
    #[error("usage error: {0}")]
    Usage(String),
    /// Missing or malformed input files and I/O failures. Exit 2.
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<llsh_core::Error> for CliError {
    fn from(e: llsh_core::Error) -> Self {
        match e {
            llsh_core::Error::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Applies `LLSH_THREADS` to the global worker pool. Invalid values are a
/// usage error.
pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("LLSH_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("LLSH_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure worker threads: {e}")))
}
