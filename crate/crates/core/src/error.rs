use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RaegError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite value in {term}: {detail}")]
    Numeric { term: String, detail: String },

    #[error("checkpoint config mismatch on `{field}`: expected {expected}, found {found}")]
    ConfigMismatch { field: String, expected: String, found: String },

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("external defense `{name}` failed: {reason}")]
    ExternalDefense { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tensor(#[from] raeg_autograd::Error),
}

impl RaegError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config { field: field.into(), reason: reason.into() }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, RaegError>;
