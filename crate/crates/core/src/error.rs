use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed csv row in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("inconsistent bundle: {0}")]
    InconsistentBundle(String),

    #[error("unknown dtype {0:?}, expected \"f32le\"")]
    UnknownDtype(String),

    #[error("invalid camera id {0}")]
    InvalidCameraId(i64),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown split {0:?}")]
    UnknownSplit(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown identity (pid = -1) at {0}")]
    UnknownIdentity(String),

    #[error("not a self-distance matrix: {0}")]
    NotSelfMatrix(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
