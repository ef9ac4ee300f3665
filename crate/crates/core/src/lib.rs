//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! The building blocks are a row-major [`Tensor`], a [`Tape`] that records
//! operations as they execute and replays them backward, and a
//! finite-difference [`gradcheck`] harness that verifies every backward rule
//! in 64-bit precision. Training code instantiates everything at `f32`; all
//! correctness checks instantiate at `f64`.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod opcheck;
pub mod patch;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

/// Plain (untracked) cosine similarity between two equal-length slices,
/// with both norms clamped to `eps`.
pub fn cosine_sim<S: Scalar>(a: &[S], b: &[S], eps: f64) -> S {
    assert_eq!(a.len(), b.len(), "cosine_sim requires equal lengths");
    tape::cosine_kernel(a, b, eps)
}

/// Plain matrix product on tensors shaped `[m, k]` and `[k, n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dims");
    tape::matmul_kernel(a, b)
}
