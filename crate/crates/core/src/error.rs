use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("masked softmax: slice {slice} has no kept entries")]
    InvalidMask { slice: usize },

    #[error("cosine similarity of a zero-norm vector")]
    ZeroVector,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("gradient check failed at parameter {name}[{index}]: {reason}")]
    GradCheck {
        name: String,
        index: usize,
        reason: String,
    },

    #[error("repeat {repeat}: {source}")]
    Repeat {
        repeat: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures (non-finite values, failed gradient checks) as opposed
    /// to bad input data or configuration.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::GradCheck { .. } => true,
            Error::Repeat { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
