use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the harness. Engine failures keep their message and are
/// prefixed with the stage that produced them.
#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("truncated data: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("{stage}: {source}")]
    Engine {
        stage: &'static str,
        #[source]
        source: symvae::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub(crate) fn validation<T>(field: &str, message: impl Into<String>) -> Result<T> {
    Err(HarnessError::Validation { field: field.into(), message: message.into() })
}

/// Tags engine errors with the module that raised them.
pub(crate) trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> Stage<T> for symvae::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| HarnessError::Engine { stage, source })
    }
}
