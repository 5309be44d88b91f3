use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocab { token: u32, vocab: usize },

    #[error("sequence of length {len} exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("sub-state count mismatch: expected {expected}, got {got}")]
    StateCount { expected: usize, got: usize },

    #[error("branch `{0}` is not enabled")]
    BranchDisabled(char),

    #[error("empty segment at index {0}")]
    EmptySegment(usize),

    #[error("response is empty")]
    EmptyResponse,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid task spec: {0}")]
    Task(String),

    #[error("training diverged at step {step} (state dumped to {dump:?})")]
    Diverged { step: usize, dump: Option<PathBuf> },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
