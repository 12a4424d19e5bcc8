//! Crate-wide error type. Autodiff has its own [`crate::tensor::TensorError`]
//! because the tensor layer is usable on its own; everything else funnels here.

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum UnmtError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad key, unparsable value, or missing required key in a config file.
    #[error("config error: {0}")]
    Config(String),

    /// Vocabulary or dataset violation (empty line, unknown id, cap exceeded).
    #[error("corpus error: {0}")]
    Corpus(String),

    /// A structured file (lexicon, embeddings, checkpoint, CSV) is malformed.
    #[error("format error in {path} line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Checkpoint payload disagrees with the requesting configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged; the dump names the batch that produced the value.
    #[error("non-finite loss at iter {iter} epoch {epoch} step {step}: {dump}")]
    NonFiniteLoss {
        iter: usize,
        epoch: usize,
        step: usize,
        dump: String,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl UnmtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UnmtError::Io {
            path: path.into(),
            source,
        }
    }
}
