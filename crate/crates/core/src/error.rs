use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Each variant maps to one failure class of the harness
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("model kind error: {0}")]
    Kind(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("audit error: {0}")]
    Audit(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    /// Process exit code used by the CLI: 2 config, 3 training, 4 audit, 5 format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Training(_) | Error::Numeric(_) => 3,
            Error::Audit(_) => 4,
            Error::Format { .. } => 5,
            Error::Io { .. } => 2,
            _ => 3,
        }
    }
}
