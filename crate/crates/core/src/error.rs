use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid codec config: {0}")]
    InvalidCodec(String),
    #[error("bit sequence overflows capacity: len {len} > capacity {capacity}")]
    CapacityOverflow { len: usize, capacity: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid augmentation: {0}")]
    InvalidAugment(String),
    #[error("invalid network spec: {0}")]
    InvalidNetwork(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("json error: {0}")]
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
