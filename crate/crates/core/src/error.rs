use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("vocabulary error: id {id} outside [0, {size})")]
    Vocabulary { id: usize, size: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value {value} outside [0, {extent}]")]
    Range { value: f64, extent: f64 },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint compatibility error: {0}")]
    Compatibility(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (stage {stage})")]
    NonFinite { stage: u8, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
