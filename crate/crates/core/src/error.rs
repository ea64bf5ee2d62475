use std::path::PathBuf;

use delib_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus format: {0}")]
    Format(String),
    #[error("source and target structure differ: {0}")]
    StructureMismatch(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sentence of {len} tokens exceeds the maximum length {max}")]
    SentenceTooLong { len: usize, max: usize },
    #[error("target prefix must start with BOS")]
    MissingBos,
    #[error("first-pass draft missing or does not cover the talk")]
    MissingDraft,
    #[error("talk `{0}` has no target sentences")]
    MissingTargets(String),
    #[error("empty sentence has no embedding")]
    EmptySentence,
    #[error("empty document")]
    EmptyDocument,
    #[error("{0}")]
    Metric(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
