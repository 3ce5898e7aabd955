use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),

    #[error("mask {mask} has shape {mask_shape:?} but image {image} has shape {image_shape:?}")]
    MaskShape {
        image: PathBuf,
        mask: PathBuf,
        image_shape: (usize, usize),
        mask_shape: (usize, usize),
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty candidate pool")]
    EmptyPool,

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },

    #[error("{0}")]
    Metric(String),

    #[error("corrupt or incompatible file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("weights: {0}")]
    Weights(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
