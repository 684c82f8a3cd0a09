//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// All failure modes surfaced by the pipeline.
///
/// Variants are grouped by how a caller should react: configuration
/// problems, malformed input data, I/O failures, and backend failures
/// (of which only transport-level ones are retryable).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("surface form {surface:?} maps to both {kept:?} and {rejected:?}")]
    LexiconConflict {
        surface: String,
        kept: String,
        rejected: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("duplicate sample id {id:?} (lines {first_line} and {second_line})")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("missing annotations for sample ids: {}", .0.join(", "))]
    MissingAnnotations(Vec<String>),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("backend transport error: {0}")]
    Transport(String),

    #[error("backend rejected request: {0}")]
    Rejected(String),

    #[error("backend timed out: {0}")]
    Timeout(String),

    #[error("backend capability missing: {0}")]
    Capability(String),

    #[error("hook command failed: {0}")]
    Hook(String),
}

impl Error {
    /// Whether a retry of the same request has a chance of succeeding.
    /// Only transport-level failures qualify; semantic rejections and
    /// capability gaps do not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Timeout(_))
    }

    /// Whether the failure originated in a generation backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Transport(_) | Error::Rejected(_) | Error::Timeout(_) | Error::Capability(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
