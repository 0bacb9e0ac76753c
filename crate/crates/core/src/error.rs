use std::path::PathBuf;

use stdmmf_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape error in {stage}: {message}")]
    Shape { stage: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint rejected: {}", .issues.join("; "))]
    Checkpoint { issues: Vec<String> },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn shape(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape { stage: stage.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Tags engine errors with the network stage that produced them.
pub trait Stage<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> Stage<T> for std::result::Result<T, TensorError> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| match e {
            TensorError::Shape(m) => Error::shape(stage, m),
            TensorError::DuplicateName(n) => Error::config("parameter name", format!("{n} registered twice ({stage})")),
        })
    }
}
