use thiserror::Error;

/// Errors raised across the data, model, training and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(f64),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config hash {expected} not matched by {files:?}")]
    HashMismatch { expected: String, files: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
