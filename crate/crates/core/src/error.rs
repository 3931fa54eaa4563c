//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Rejection sampling could not satisfy the requested difficulty band.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("encode error: {0}")]
    Encode(String),

    /// Strict layout decoding rejected the token at `position`.
    #[error("grammar error at position {position}: {message}")]
    Grammar { position: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: sequence of {len} tokens exceeds context {context}")]
    Length { len: usize, context: usize },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Generation(_) => "generation",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Encode(_) => "encode",
            Error::Grammar { .. } => "grammar",
            Error::Format(_) => "format",
            Error::Length { .. } => "length",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
