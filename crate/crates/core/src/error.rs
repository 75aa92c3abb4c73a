use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("unsupported {kind} format version {found} (expected {expected})")]
    VersionMismatch {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("corrupt {kind} file: {message}")]
    Corrupt { kind: &'static str, message: String },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no candidate users: no user has at least {min_answers} training answers")]
    NoCandidates { min_answers: usize },

    #[error("partition does not match graph: {0}")]
    PartitionMismatch(String),

    #[error("question has no tag that maps to a topic")]
    Unroutable,

    #[error("training diverged at epoch {epoch}: learning rate too high")]
    Diverged { epoch: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn corrupt(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Corrupt {
            kind,
            message: message.into(),
        }
    }
}
