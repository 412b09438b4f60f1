use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: record {record}: {message}")]
    Parse {
        path: String,
        record: usize,
        message: String,
    },

    #[error("duplicate product id {id:?} (records {first} and {second})")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },

    #[error("record {record}: missing required field {field:?}")]
    MissingField { field: String, record: usize },

    #[error("product {id:?}: negative sales {sales}")]
    NegativeSales { id: String, sales: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("image {image_ref:?}: {message}")]
    Image { image_ref: String, message: String },

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("remote provider {url} failed after {attempts} attempt(s): {message}")]
    Remote {
        url: String,
        attempts: u32,
        message: String,
    },

    #[error("model format: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn empty(msg: impl Into<String>) -> Self {
        Error::Empty(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error beneath any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
