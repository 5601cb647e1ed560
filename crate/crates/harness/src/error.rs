use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` requires {}, which is missing (produced by `{producer}`)", path.display())]
    MissingArtifact {
        stage: &'static str,
        producer: &'static str,
        path: PathBuf,
    },
    #[error("{} was written under config {found}, but the current config hashes to {expected}", path.display())]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] vitsteer_core::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for missing or
    /// mismatched stage artifacts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::MissingArtifact { .. } | HarnessError::HashMismatch { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HarnessError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
