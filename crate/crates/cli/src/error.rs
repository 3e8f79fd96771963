use std::path::PathBuf;

/// Failures of a command, mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments; `path` names the offending field.
    #[error("invalid configuration at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error(transparent)]
    Core(#[from] gift_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
    /// One or more self-checks failed; the report was still written.
    #[error("{failed} check(s) failed")]
    CheckFailed { failed: usize },
}

impl CliError {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation { .. } => 1,
            Self::Core(_) | Self::Io { .. } | Self::Runtime(_) => 2,
            Self::CheckFailed { .. } => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::validation(path, message)
}

pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CliError {
    CliError::io(path, source)
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("serialization failed: {e}"))
    }
}
