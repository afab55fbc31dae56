use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CopsError {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss ({0}); step aborted, parameters untouched")]
    NonFiniteLoss(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CopsError {
    pub(crate) fn shape(context: &'static str, detail: String) -> Self {
        CopsError::Shape { context, detail }
    }
}

pub type Result<T> = std::result::Result<T, CopsError>;
