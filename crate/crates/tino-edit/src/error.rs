//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TinoError>;

#[derive(Debug, Error)]
pub enum TinoError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mask error: {0}")]
    Mask(String),

    /// A denoiser backend failed inside the unrolled chain; `step` is the
    /// denoising index k at which the call was made.
    #[error("backend failure at denoise step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: Box<TinoError>,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TinoError {
    /// Wrap an error with the denoise-step index it occurred at.
    pub fn at_step(self, step: usize) -> Self {
        TinoError::Backend {
            step,
            source: Box::new(self),
        }
    }
}
