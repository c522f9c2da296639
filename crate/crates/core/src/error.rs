use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, branch counts or permutations that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// Caller passed arguments outside an operation's domain.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("path count overflow while composing structure masks")]
    PathOverflow,

    #[error("ingestion error at byte offset {offset}: {message}")]
    Ingestion { offset: u64, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (last good checkpoint: epoch {last_good_epoch})")]
    Diverged {
        epoch: usize,
        last_good_epoch: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Short stable tag used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structural(_) => "structural",
            Error::Usage(_) => "usage",
            Error::Unsupported(_) => "unsupported",
            Error::PathOverflow => "overflow",
            Error::Ingestion { .. } => "ingestion",
            Error::Format(_) => "format",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
