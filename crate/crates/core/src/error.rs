use std::path::PathBuf;

use crate::tensor::TensorError;

/// Error type shared by the library modules above the tensor layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cache integrity error: {0}")]
    Integrity(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("numeric error in {layer}: {msg}")]
    Numeric { layer: String, msg: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("{file}: offset {offset}: {msg}")]
    Ingest { file: PathBuf, offset: u64, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("polynomial degree violated: held-out residual {residual:e} exceeds {tolerance:e}")]
    DegreeViolation { residual: f64, tolerance: f64 },
    #[error("input error: {0}")]
    Input(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
