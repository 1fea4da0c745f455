use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: id {id} out of range for table with {rows} rows")]
    Index { id: usize, rows: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("label error: label {0} is not in {{0, 1}}")]
    Label(usize),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: u64, message: String },

    #[error("alignment error: missing images for ids {}", .0.join(", "))]
    Alignment(Vec<String>),

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged: non-finite loss at batch {batch} of epoch {epoch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 for configuration (usage)
    /// problems, 2 for data and format problems, 3 for training and
    /// evaluation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Format(_)
            | Error::Manifest { .. }
            | Error::Alignment(_)
            | Error::Split(_) => 2,
            Error::Config(_) => 1,
            _ => 3,
        }
    }
}
