use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode image: {0}")]
    Decode(String),

    #[error("failed to encode image: {0}")]
    Encode(String),

    #[error("rect (x={x}, y={y}, side={side}) out of bounds for {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        side: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid crop count c={0}; must be at least 2")]
    InvalidC(usize),

    #[error("image too small: short side {short_side} < {required}")]
    ImageTooSmall { short_side: usize, required: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("embedding has zero norm and cannot be normalized")]
    NormalizationDegenerate,

    #[error("negative queue is empty")]
    EmptyQueue,

    #[error("at least one positive embedding is required")]
    EmptyPositives,

    #[error("batch of {batch} keys does not divide queue capacity {capacity}")]
    BatchSizeMismatch { batch: usize, capacity: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("input has zero variance")]
    DegenerateVariance,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("unknown scorer {name:?}; available: {available}")]
    UnknownScorer { name: String, available: String },

    #[error("bad thresholds: lo={lo} must be below hi={hi}")]
    BadThresholds { lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
