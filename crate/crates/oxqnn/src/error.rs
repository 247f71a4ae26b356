use std::path::{Path, PathBuf};

/// Errors raised while reading, writing or orchestrating runs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed binary input; `offset` is the byte where decoding failed.
    #[error("{}: byte {offset}: {msg}", path.display())]
    Binary { path: PathBuf, offset: u64, msg: String },
    /// Malformed text input; `line` is 1-based.
    #[error("{}: line {line}: {msg}", path.display())]
    Text { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] oxqnn_core::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attach a path to errors from in-memory parsers.
    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            Error::Binary { offset, msg, .. } => Error::Binary {
                path: path.to_path_buf(),
                offset,
                msg,
            },
            Error::Text { line, msg, .. } => Error::Text {
                path: path.to_path_buf(),
                line,
                msg,
            },
            e => e,
        }
    }
}
