//! Error type shared by every module, with the process exit codes used by the CLI.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. }
            | Error::Format(_)
            | Error::Argument(_)
            | Error::Data(_)
            | Error::DegenerateMask(_)
            | Error::UndefinedMetric(_)
            | Error::Sampling(_)
            | Error::Checkpoint(_) => 3,
            Error::Divergence(_) | Error::Calibration(_) => 4,
        }
    }
}
