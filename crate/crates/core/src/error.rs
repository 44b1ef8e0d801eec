use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("{}: {msg} at byte offset {offset}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Self {
        Error::Dim {
            op,
            axis,
            expected,
            found,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
