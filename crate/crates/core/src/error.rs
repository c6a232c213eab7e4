use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer `{layer}`: {msg}")]
    Layer { layer: String, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("phantom: {0}")]
    Phantom(String),

    #[error("scribble: {0}")]
    Scribble(String),

    #[error("geodesic: {0}")]
    Geodesic(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn layer(layer: &str, msg: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
