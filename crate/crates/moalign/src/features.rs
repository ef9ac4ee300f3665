use moalign_core::{Scalar, Tensor};

use crate::error::{PipelineError, Result};

/// Spatiotemporal token features on an `(frames, height, width)` grid with
/// `channels` per token, stored as `[F, H, W, C]`. Flattened row-major this
/// doubles as the token matrix `[F*H*W, C]` with tokens ordered frame-major,
/// which is the ordering every similarity computation assumes.
#[derive(Debug, Clone)]
pub struct FeatureGrid<S> {
    tensor: Tensor<S>,
}

impl<S: Scalar> FeatureGrid<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(PipelineError::Scene(format!(
                "feature grid must be [F,H,W,C], got {:?}",
                tensor.shape()
            )));
        }
        Ok(FeatureGrid { tensor })
    }

    /// From convolution layout `[1, C, F, H, W]`.
    pub fn from_conv_layout(t: &Tensor<S>) -> Result<Self> {
        if t.shape().len() != 5 || t.shape()[0] != 1 {
            return Err(PipelineError::Scene(format!(
                "expected [1,C,F,H,W], got {:?}",
                t.shape()
            )));
        }
        let s = t.shape().to_vec();
        let squeezed = t.reshaped(vec![s[1], s[2], s[3], s[4]])?;
        Ok(FeatureGrid {
            tensor: squeezed.permuted(&[1, 2, 3, 0])?,
        })
    }

    pub fn to_conv_layout(&self) -> Tensor<S> {
        let g = self.tensor.permuted(&[3, 0, 1, 2]).expect("rank 4");
        let s = g.shape().to_vec();
        g.reshaped(vec![1, s[0], s[1], s[2], s[3]]).expect("same numel")
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.frames(), self.height(), self.width()]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height() * self.width()
    }

    pub fn token_count(&self) -> usize {
        self.frames() * self.tokens_per_frame()
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    /// `[N, C]` token matrix; a reshape of the underlying buffer.
    pub fn token_matrix(&self) -> Tensor<S> {
        self.tensor
            .reshaped(vec![self.token_count(), self.channels()])
            .expect("same numel")
    }

    /// Mean over all tokens: `[C]`.
    pub fn mean_pooled(&self) -> Tensor<S> {
        let n = self.token_count();
        let c = self.channels();
        let d = self.tensor.data();
        let inv = S::from_f64(1.0 / n as f64);
        Tensor::from_fn(&[c], |j| {
            let mut acc = S::zero();
            for i in 0..n {
                acc = acc + d[i * c + j];
            }
            acc * inv
        })
    }
}
