use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotnError {
    #[error("{path}: bad magic (expected \"MOTN\")")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },

    #[error("{path}: unsupported dtype code {dtype}")]
    UnsupportedDtype { path: PathBuf, dtype: u8 },

    #[error("{path}: truncated payload ({got} bytes, expected {expected})")]
    Truncated {
        path: PathBuf,
        got: usize,
        expected: usize,
    },

    #[error("{path}: invalid shape in header: {msg}")]
    InvalidShape { path: PathBuf, msg: String },

    #[error("{path}: dtype mismatch (file holds {found}, caller wants {wanted})")]
    DtypeMismatch {
        path: PathBuf,
        found: &'static str,
        wanted: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] moalign_core::TensorError),

    #[error(transparent)]
    Motn(#[from] MotnError),

    #[error("scene: {0}")]
    Scene(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("dataset manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("probe: {0}")]
    Probe(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
