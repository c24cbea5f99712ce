use std::path::PathBuf;

/// Errors produced by the pipeline library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("index {index} out of range for {what} (size {size})")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed data in {source_name}: {detail}")]
    Parse { source_name: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(source_name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
