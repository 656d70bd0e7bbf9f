use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("every entry has zero probability mass")]
    AllMassZero,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema violation in image `{image}`, attribute `{attribute}`: {detail}")]
    SchemaViolation {
        image: String,
        attribute: String,
        detail: String,
    },

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("malformed caption: {0}")]
    MalformedCaption(String),

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("question not found in table: `{0}`")]
    UnknownQuestion(String),

    #[error("image `{0}` is not in the issue domain")]
    ImageNotInIssue(String),

    #[error("invalid issue: {0}")]
    InvalidIssue(String),

    #[error("cell is empty")]
    EmptyCell,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no classifier mapping for issue `{0}`")]
    UnknownIssueMapping(String),

    #[error("enumeration of {size} captions exceeds cap {cap}")]
    EnumerationTooLarge { size: u128, cap: u128 },

    #[error("speaker protocol error: {0}")]
    Protocol(String),

    #[error("speaker served {got} log-probs, handshake vocabulary has {expected}")]
    VocabMismatch { expected: usize, got: usize },

    #[error("speaker timed out")]
    Timeout,

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
