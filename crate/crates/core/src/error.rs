use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline, model, trainer or analysis code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: malformed row: {msg}")]
    MalformedRow { file: String, line: u64, msg: String },

    #[error("counties present in dynamic data but missing from static data: {0:?}")]
    UnknownCounties(Vec<String>),

    #[error("dates are not contiguous: missing {missing}")]
    DateGap { missing: chrono::NaiveDate },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
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
