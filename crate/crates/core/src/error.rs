use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// `Dimension` and `Contract` indicate caller bugs (bad shapes, misuse of a
/// consumed tape, stepping a finished episode). The remaining variants map to
/// the CLI exit codes: config errors exit 2, missing artifacts exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {what} (expected at {path})")]
    MissingArtifact { what: String, path: PathBuf },

    #[error("checkpoint format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported checkpoint version {found} (supported: {supported}) in {path}")]
    Version {
        path: PathBuf,
        found: u16,
        supported: u16,
    },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn contract(msg: impl ToString) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn config(msg: impl ToString) -> Self {
        Error::Config(msg.to_string())
    }
}
