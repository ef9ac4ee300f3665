//! Frozen random video encoder: a patch-embedding convolution followed by a
//! SiLU and one temporal mixing convolution. Weights are drawn once from a
//! seed and never receive gradients; the temporal convolution uses replicate
//! padding so a constant clip maps to a constant feature grid.

use moalign_core::conv::conv3d;
use moalign_core::{Scalar, Tensor};
use rand::Rng;

use crate::error::{PipelineError, Result};
use crate::features::FeatureGrid;
use crate::rngs::{self, tags};
use crate::synthvid::VideoClip;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// `(t, h, w)` patch size; clip dims must divide exactly.
    pub patch: [usize; 3],
    /// Output embedding width.
    pub d_v: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: [3, 8, 8],
            d_v: 96,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<S> {
    pub cfg: EncoderConfig,
    pub seed: u64,
    patch_kernel: Tensor<S>,
    patch_bias: Tensor<S>,
    temporal_kernel: Tensor<S>,
    temporal_bias: Tensor<S>,
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub(crate) fn uniform_init<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-bound..bound)))
}

/// Uniform init in [-sqrt(6/fan_in), sqrt(6/fan_in)]; the larger gain keeps
/// gradient magnitudes usable through stacked rectified conv layers, which
/// matters at the short desk-scale training budgets.
pub(crate) fn kaiming_uniform<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-bound..bound)))
}

impl<S: Scalar> Encoder<S> {
    pub fn init(seed: u64, cfg: EncoderConfig) -> Result<Self> {
        if cfg.d_v == 0 {
            return Err(PipelineError::Config("encoder width d_v must be > 0".into()));
        }
        if cfg.patch.iter().any(|&p| p == 0) {
            return Err(PipelineError::Config(format!(
                "encoder patch dims must be positive, got {:?}",
                cfg.patch
            )));
        }
        let mut rng = rngs::derive(seed, tags::ENCODER, 0);
        let [pt, ph, pw] = cfg.patch;
        let fan_patch = 3 * pt * ph * pw;
        let patch_kernel = uniform_init(&[cfg.d_v, 3, pt, ph, pw], fan_patch, &mut rng);
        let patch_bias = uniform_init(&[cfg.d_v], fan_patch, &mut rng);
        let fan_temp = cfg.d_v * 3;
        let temporal_kernel = uniform_init(&[cfg.d_v, cfg.d_v, 3, 1, 1], fan_temp, &mut rng);
        let temporal_bias = uniform_init(&[cfg.d_v], fan_temp, &mut rng);
        Ok(Encoder {
            cfg,
            seed,
            patch_kernel,
            patch_bias,
            temporal_kernel,
            temporal_bias,
        })
    }

    /// Token grid dims for a clip of `(f, h, w)`; errors unless divisible.
    pub fn grid_for(&self, f: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        let [pt, ph, pw] = self.cfg.patch;
        if f % pt != 0 || h % ph != 0 || w % pw != 0 {
            return Err(PipelineError::Config(format!(
                "clip dims ({f},{h},{w}) not divisible by patch {:?}",
                self.cfg.patch
            )));
        }
        Ok([f / pt, h / ph, w / pw])
    }

    /// Extract spatiotemporal features; pure function of (weights, clip).
    pub fn encode(&self, clip: &VideoClip<S>) -> Result<FeatureGrid<S>> {
        self.grid_for(clip.frames(), clip.height(), clip.width())?;
        let x = clip.to_conv_layout();
        let embedded = conv3d(&x, &self.patch_kernel, self.cfg.patch, [0, 0, 0])?;
        let embedded = add_channel_bias(&embedded, &self.patch_bias);
        let activated = embedded.map(|v| v * (S::one() / (S::one() + (-v).exp())));
        let padded = replicate_pad_temporal(&activated, 1);
        let mixed = conv3d(&padded, &self.temporal_kernel, [1, 1, 1], [0, 0, 0])?;
        let mixed = add_channel_bias(&mixed, &self.temporal_bias);
        FeatureGrid::from_conv_layout(&mixed)
    }

    /// Flat view of all weights, for hashing and serialization.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("encoder.patch_kernel", &self.patch_kernel),
            ("encoder.patch_bias", &self.patch_bias),
            ("encoder.temporal_kernel", &self.temporal_kernel),
            ("encoder.temporal_bias", &self.temporal_bias),
        ]
    }
}

pub(crate) fn add_channel_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let (c_n, inner) = (s[1], s[2] * s[3] * s[4]);
    let (xd, bd) = (x.data(), bias.data());
    Tensor::from_fn(s, |i| xd[i] + bd[(i / inner) % c_n])
}

/// Edge-replicate padding along the temporal axis of `[B, C, T, H, W]`.
fn replicate_pad_temporal<S: Scalar>(x: &Tensor<S>, pad: usize) -> Tensor<S> {
    let s = x.shape();
    let (b_n, c_n, t_n, h_n, w_n) = (s[0], s[1], s[2], s[3], s[4]);
    let plane = h_n * w_n;
    let xd = x.data();
    Tensor::from_fn(&[b_n, c_n, t_n + 2 * pad, h_n, w_n], |i| {
        let hw = i % plane;
        let rest = i / plane;
        let t = rest % (t_n + 2 * pad);
        let bc = rest / (t_n + 2 * pad);
        let t_src = t.saturating_sub(pad).min(t_n - 1);
        xd[(bc * t_n + t_src) * plane + hw]
    })
}
