use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum EloError {
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape(Vec<usize>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("loss has no unmasked positions")]
    EmptyLoss,

    #[error("index {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SeqLen { len: usize, max: usize },

    #[error("unknown tensor name `{0}`")]
    Name(String),

    #[error("invalid layer selection: {0}")]
    Selection(String),

    #[error("lineage mismatch: sub-model derives from {sub}, target model is {target}")]
    Lineage { sub: String, target: String },

    #[error("invalid mix ratio {0}:{1}")]
    Ratio(usize, usize),

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("non-finite loss {loss} at step {step} during {phase}")]
    Divergence { phase: String, step: usize, loss: f64 },

    #[error("merge error: {0}")]
    Merge(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EloError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        EloError::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EloError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = EloError> = std::result::Result<T, E>;
