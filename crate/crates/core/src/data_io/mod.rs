//! MNIST ingestion, checkpoint persistence and run configuration.

mod checkpoint;
mod config;
mod mnist;

use std::path::PathBuf;

use thiserror::Error;

use crate::network::NetworkError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{parse_config, RunConfig};
pub use mnist::{
    load_mnist, parse_idx_images, parse_idx_labels, Dataset, IMAGE_MAGIC, LABEL_MAGIC, MNIST_MEAN, MNIST_STD,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: bad magic number {found} (expected {expected})")]
    Magic { file: String, expected: u32, found: u32 },
    #[error("{what}: expected {expected} bytes, found {found}")]
    Length { what: String, expected: usize, found: usize },
    #[error("{0}")]
    Format(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { expected: u8, found: u8 },
    #[error("checkpoint blob `{blob}` fails its sha256 check")]
    Hash { blob: String },
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}
