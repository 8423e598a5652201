use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("{file}: expected {expected} values, found {found}")]
    ShapeMismatch {
        file: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{file}: truncated ({bytes} bytes is not a whole number of {width}-byte values)")]
    Truncated {
        file: PathBuf,
        bytes: usize,
        width: usize,
    },

    #[error("frame {frame}: class count {found} does not match scene class count {expected}")]
    ClassCountMismatch {
        frame: u32,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("distribution does not sum to one (sum = {0})")]
    NotNormalized(f64),

    #[error("voxel has no observations")]
    Unobserved,

    #[error("observation cache is missing or empty; re-run fusion with observation caching enabled")]
    MissingCache,

    #[error("GLFS fusion requires a trained parameter file")]
    MissingGlfsParams,

    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("degenerate labels: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
