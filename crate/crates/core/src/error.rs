use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {index}: {msg}")]
    Layer { index: usize, msg: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty softmax axis")]
    EmptyAxis,

    #[error("backward has already run on this tape")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any differentiable input")]
    Detached,

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: length {len} is not a multiple of 16 bytes")]
    Truncated { path: PathBuf, len: u64 },

    #[error("{path}: record {index} has a non-finite value")]
    NonFiniteRecord { path: PathBuf, index: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("scene {scene}: non-finite loss")]
    NanLoss { scene: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
