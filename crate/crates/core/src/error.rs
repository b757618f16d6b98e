use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sentence length {0} is unsupported (need at least 2 tokens)")]
    UnsupportedLength(usize),

    #[error("sentence cannot be parsed: every derivation has zero probability")]
    Unparseable,

    #[error("refusing to enumerate trees over {0} tokens (limit is 10)")]
    TooManyTrees(usize),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: line {line}: {msg}")]
    Syntax {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the caller's inputs rather than by this library.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Input(_)
                | Error::Syntax { .. }
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::UnsupportedLength(_)
                | Error::TooManyTrees(_)
        )
    }
}
