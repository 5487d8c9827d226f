use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}: byte {offset}: {reason}", path.display())]
    Format { path: PathBuf, offset: u64, reason: String },

    #[error("episode {episode}: {reason}")]
    Episode { episode: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: line {line}: {reason}", path.display())]
    Json { path: PathBuf, line: usize, reason: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn episode(episode: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Episode { episode: episode.into(), reason: reason.into() }
    }

    /// Process exit code for this error class: 1 for usage and
    /// configuration, 2 for data and format problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
