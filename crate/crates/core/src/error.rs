use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MimuError>;

#[derive(Debug, Error)]
pub enum MimuError {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("example {index} has no cue record for shortcut `{kind}`")]
    MissingCue { index: usize, kind: String },

    #[error("attention weights were not captured during the forward pass")]
    AttentionNotCaptured,

    #[error("class(es) {0:?} absent from the calibration split")]
    MissingClasses(Vec<usize>),

    #[error("parameters are frozen and cannot be updated")]
    Frozen,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl MimuError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        MimuError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        MimuError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MimuError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MimuError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            MimuError::Io { .. } => 3,
            MimuError::Diverged { .. } | MimuError::NonFinite(_) => 4,
            _ => 2,
        }
    }
}
