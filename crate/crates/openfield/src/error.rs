use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] openfield_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config {}: {source}", path.display())]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("missing upstream artifact from stage `{stage}`: {what}")]
    MissingStage { stage: &'static str, what: String },
    #[error("stage `{stage}` artifact {file} changed since it was written (hash mismatch)")]
    StaleArtifact { stage: String, file: String },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    /// 2 for numeric failures (NaN abort), 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> CliError {
        CliError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
