use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the lab library.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("tokenizer error: {0}")]
    Tokenizer(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("sample size error: {0}")]
    SampleSize(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version {found}; supported versions: {supported:?}")]
    UnsupportedVersion { found: u32, supported: Vec<u32> },
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
