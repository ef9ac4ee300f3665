//! Two-stage motion-centric alignment at desk scale.
//!
//! Stage 1 learns a low-dimensional motion subspace by compressing frozen
//! video-encoder features and training a light decoder to regress the
//! ground-truth optical flow of synthetic moving-shape clips. Stage 2
//! fine-tunes a toy latent video diffusion model whose projected hidden
//! states are pulled toward that subspace with a temporally weighted
//! relational loss, alongside the usual denoising objective.

pub mod align;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod features;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod rngs;
pub mod synthvid;

pub use error::{PipelineError, Result};
