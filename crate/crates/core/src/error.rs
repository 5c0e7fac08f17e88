use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("kv cache overflow: {cached} cached + {new} new exceeds max_seq {max_seq}")]
    CacheOverflow {
        cached: usize,
        new: usize,
        max_seq: usize,
    },
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("missing parameter file for role `{role}`: {path}")]
    MissingParamFile { role: String, path: PathBuf },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown template id {0}")]
    UnknownTemplate(usize),
    #[error("unknown precision profile `{0}`")]
    UnknownProfile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
