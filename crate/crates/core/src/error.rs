use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyperparameter or option outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Malformed or out-of-range input data.
    #[error("data error: {0}")]
    Data(String),

    /// The API was driven in an order or mode it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward value or loss became NaN or infinite.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at {at}: {detail}")]
    Diverged { at: String, detail: String },

    /// A metric that has no value for the given input (e.g. AUC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
