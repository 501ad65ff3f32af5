use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("label {0:?} is not in the label inventory")]
    UnknownLabel(String),

    #[error("class {label:?} has {available} examples, {requested} requested")]
    InsufficientExamples {
        label: String,
        available: usize,
        requested: usize,
    },

    #[error("template {template}: {message}")]
    Template {
        template: &'static str,
        message: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is a usage or configuration problem rather than a
    /// runtime failure. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
