use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("permutation of length {perm} does not match {chunks} chunks")]
    SizeMismatch { perm: usize, chunks: usize },

    #[error("sequence of {len} tokens exceeds the context window of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, evaluation set {evalset}")]
    VocabMismatch { checkpoint: String, evalset: String },

    #[error("non-finite loss at batch {batch} (lr {lr:e})")]
    NonFiniteLoss { batch: usize, lr: f64 },

    #[error("demonstration facts overlap the queried fact (id {0})")]
    DemoOverlap(u64),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed record in {path}: {message}")]
    Record { path: PathBuf, message: String },

    #[error(transparent)]
    Segment(#[from] crate::segment::SegmentError),

    #[error(transparent)]
    Assistant(#[from] crate::assistant::AssistantError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
