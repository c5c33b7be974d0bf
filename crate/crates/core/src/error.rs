use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BagError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BagError {
    /// Tensor shapes or channel counts that do not fit the architecture.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image too small: {0}")]
    Undersized(String),

    #[error("blurred image {orphan} has no sharp counterpart at {expected}")]
    MissingCounterpart { orphan: PathBuf, expected: PathBuf },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint variant mismatch: checkpoint has {found}, expected {expected}")]
    VariantMismatch { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A loss or gradient became non-finite; the step was not applied.
    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BagError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BagError::Io {
            path: path.into(),
            source,
        }
    }
}
