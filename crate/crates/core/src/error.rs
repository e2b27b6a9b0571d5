use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    CorpusLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("generation budget exceeded: prompt {prompt} + max_new {max_new} > max_seq_len {max}")]
    BudgetExceeded {
        prompt: usize,
        max_new: usize,
        max: usize,
    },

    #[error("adapter is already {0}")]
    MergeState(&'static str),

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("adapter was trained against base {expected}, but the supplied base hashes to {actual}")]
    BaseHashMismatch { expected: String, actual: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures get a distinct process exit code in the CLI.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
