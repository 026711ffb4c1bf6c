//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unbound variable `{0}`")]
    UnboundVariable(String),

    #[error("`{0}` does not appear in the graph")]
    NotInGraph(String),

    #[error("gradient target must be a scalar, got shape {0:?}")]
    NonScalarTarget(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
