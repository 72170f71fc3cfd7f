use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("edgemap cache miss: {} not found; precompute it with the external detector", path.display())]
    CacheMiss { path: PathBuf },

    #[error("cannot sample an episode from class `{class}`: {available} instances, {needed} needed")]
    Sampling {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at iteration {iteration}: {part} = {value}")]
    NonFinite {
        iteration: usize,
        part: &'static str,
        value: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
