use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes that do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar parameter outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an operation's contract (wrong mode, missing input).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schedule error: iteration {iter} is outside [0, {max_iter})")]
    Schedule { iter: usize, max_iter: usize },

    /// Non-finite loss component encountered during training.
    #[error("non-finite {component} at step {step}: {value}")]
    NonFinite {
        component: &'static str,
        step: usize,
        value: f64,
    },

    /// A file did not match the expected on-disk format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("version mismatch in {path}: expected {expected}, found {found}")]
    Version {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Short category name used by the CLI for exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::Init(_) => "init",
            Error::Validation(_) => "validation",
            Error::Schedule { .. } => "schedule",
            Error::NonFinite { .. } => "numeric",
            Error::Format { .. } | Error::Version { .. } => "format",
            Error::Io { .. } | Error::Image { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
