use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error in {origin}: {message}")]
    Parse { origin: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid parametrization: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pipeline stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(origin: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse { origin: origin.into(), message: message.to_string() }
    }

    /// Stable machine-readable code printed by the CLI in front of the message.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Image { .. } => "E_IMAGE",
            Error::Parse { .. } => "E_PARSE",
            Error::Config(_) => "E_CONFIG",
            Error::Manifest(_) => "E_MANIFEST",
            Error::Param(_) => "E_PARAM",
            Error::Shape(_) => "E_SHAPE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Stage { .. } => "E_STAGE",
        }
    }
}
