use std::path::PathBuf;

/// Errors produced anywhere in the policy stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{layer}: shape mismatch, expected {expected}, got {actual}")]
    Shape {
        layer: String,
        expected: String,
        actual: String,
    },
    #[error("{0}: backward called before forward")]
    BackwardBeforeForward(String),
    #[error("attention over an empty key sequence")]
    EmptyKeys,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("environment fault: {0}")]
    EnvFault(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(layer: &str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            layer: layer.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
