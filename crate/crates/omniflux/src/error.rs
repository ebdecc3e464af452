//! Crate-wide error type and process exit codes.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown keys, invalid values, flag misuse.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid input data (token ids, labels, inconsistent records).
    #[error("data error: {0}")]
    Data(String),

    /// A file did not match its expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training aborted (non-finite loss).
    #[error("training aborted: {0}")]
    Train(String),

    /// Evaluation requested without all fine-tuned task states.
    #[error("missing fine-tuned states: {0}")]
    MissingStates(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data(_) => 2,
            Error::Io { .. } | Error::Format(_) => 3,
            Error::Train(_) => 4,
            Error::MissingStates(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
