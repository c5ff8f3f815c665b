use std::path::PathBuf;

use crate::data::ClassLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset directory not found: {0}")]
    MissingDirectory(PathBuf),

    #[error("class {label} has no images under {dir}")]
    EmptyClass { label: ClassLabel, dir: PathBuf },

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("image {path} is {width}x{height}, expected {expected_width}x{expected_height}")]
    UnexpectedResolution {
        path: PathBuf,
        width: u32,
        height: u32,
        expected_width: u32,
        expected_height: u32,
    },

    #[error("unsatisfiable split for class {label}: {available} images, {requested} requested for val+test (need at least one left for train)")]
    UnsatisfiableSplit {
        label: ClassLabel,
        available: usize,
        requested: usize,
    },

    #[error("duplicate image content {hash} at {first} and {second}")]
    DuplicateContent {
        hash: String,
        first: String,
        second: String,
    },

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (records {indices:?})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        indices: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("pretrained weights: {0}")]
    Weights(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
