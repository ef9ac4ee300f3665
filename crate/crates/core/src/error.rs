use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Dimension mismatch between operands; `axis` names the offending axis.
    #[error("{op}: axis {axis}: {msg}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        msg: String,
    },

    #[error("shape {0:?} contains a zero-size dimension")]
    ZeroDim(Vec<usize>),

    #[error("shape must have at least one dimension")]
    EmptyShape,

    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this record; build a fresh one")]
    BackwardTwice,

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
