use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum GamError {
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape { expected: [usize; 3], actual: [usize; 3] },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("score is not finite ({0})")]
    NonFiniteScore(f64),
    #[error("non-finite gradient at layer {0}")]
    NonFiniteGradient(String),
    #[error("unknown layer: {0}")]
    UnknownLayer(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(&'static str),
    #[error("invalid score specification: {0}")]
    InvalidScore(String),
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("training did not reach {target:.1}% train accuracy within {epochs} epochs (reached {reached:.1}%)")]
    TrainingBudgetExceeded { target: f64, reached: f64, epochs: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GamError>;

impl GamError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GamError::Io { path: path.into(), source }
    }
}
