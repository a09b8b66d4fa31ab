use std::path::PathBuf;

use autodiff::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed or inconsistent file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: missing or invalid key `{0}`")]
    Schema(String),

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid ontology: {0}")]
    Validation(String),

    /// Every layer's accuracy drop is zero, so layer weights are undefined.
    #[error("degenerate ablation profile: all layer deltas are zero")]
    DegenerateProfile,

    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse { line: e.line(), column: e.column(), msg: e.to_string() }
    }
}
