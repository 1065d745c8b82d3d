use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("classifier backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("batch item {index} failed: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("duplicate feature specification id `{0}`")]
    DuplicateId(String),

    #[error("unknown feature specification `{0}`")]
    UnknownSpec(String),

    #[error("feature `{0}` has an empty region")]
    EmptyFeature(String),

    #[error("detector for `{spec_id}` unavailable: {reason}")]
    DetectorUnavailable { spec_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid registry: {0}")]
    InvalidRegistry(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("evaluation aborted: {failed} of {total} images failed")]
    EvaluationAborted { failed: usize, total: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure originates in an external model process.
    pub fn is_backend(&self) -> bool {
        match self {
            Error::BackendUnavailable(_) | Error::DetectorUnavailable { .. } => true,
            Error::BatchItem { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}
