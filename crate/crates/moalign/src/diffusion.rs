//! Toy latent video diffusion: a frozen pooling stub in place of a learned
//! video autoencoder, a forward noising process, a small transformer
//! denoiser with a hidden-state tap, and the projection head that maps tap
//! features onto the motion-subspace grid.

use moalign_core::{Scalar, Tape, Tensor, TensorId};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoder::{kaiming_uniform, uniform_init};
use crate::error::{PipelineError, Result};
use crate::optim::ParamGroup;
use crate::rngs::{self, tags};
use crate::synthvid::VideoClip;

// ── noise schedule ─────────────────────────────────────────────────

/// Cumulative signal levels `alpha_bar[0..=T]`, monotone non-increasing
/// with `alpha_bar[0] = 1` and every value in (0, 1].
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear decay over `t_steps`: `alpha_bar[t] = 1 - t / (T + 1)`, which
    /// keeps the terminal level strictly positive.
    pub fn linear(t_steps: usize) -> Self {
        let denom = (t_steps + 1) as f64;
        NoiseSchedule {
            alpha_bar: (0..=t_steps).map(|t| 1.0 - t as f64 / denom).collect(),
        }
    }

    pub fn custom(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(PipelineError::Config(
                "schedule must start at alpha_bar[0] = 1 and cover at least one step".into(),
            ));
        }
        for w in alpha_bar.windows(2) {
            if w[1] > w[0] {
                return Err(PipelineError::Config(
                    "alpha_bar must be monotone non-increasing".into(),
                ));
            }
        }
        if alpha_bar.iter().any(|&a| a <= 0.0 || a > 1.0) {
            return Err(PipelineError::Config(
                "alpha_bar values must lie in (0, 1]".into(),
            ));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| PipelineError::Config(format!("timestep {t} out of range", )))
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`; returns both
/// `z_t` and the sampled noise.
pub fn forward_noise<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if t < 1 || t > schedule.t_max() {
        return Err(PipelineError::Config(format!(
            "timestep {t} outside [1, {}]",
            schedule.t_max()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps = Tensor::from_fn(z0.shape(), |_| {
        S::from_f64(rng.sample::<f64, _>(StandardNormal))
    });
    let zt = Tensor::from_fn(z0.shape(), |i| {
        S::from_f64(sa * z0.data()[i].to_f64() + sn * eps.data()[i].to_f64())
    });
    Ok((zt, eps))
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss<S: Scalar>(pred: &Tensor<S>, noise: &Tensor<S>) -> Result<S> {
    if pred.shape() != noise.shape() {
        return Err(PipelineError::Config(format!(
            "diffusion_loss shape mismatch: {:?} vs {:?}",
            pred.shape(),
            noise.shape()
        )));
    }
    let n = pred.numel();
    let mut acc = S::zero();
    for (a, b) in pred.data().iter().zip(noise.data()) {
        let d = *a - *b;
        acc = acc + d * d;
    }
    Ok(acc / S::from_f64(n as f64))
}

/// Tape form: `mean((pred - noise)^2)`.
pub fn diffusion_loss_on(
    tape: &mut Tape<impl Scalar>,
    pred: TensorId,
    noise: TensorId,
) -> Result<TensorId> {
    if tape.value(pred).shape() != tape.value(noise).shape() {
        return Err(PipelineError::Config(format!(
            "diffusion_loss shape mismatch: {:?} vs {:?}",
            tape.value(pred).shape(),
            tape.value(noise).shape()
        )));
    }
    let d = tape.sub(pred, noise)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

// ── frozen latent encoder stub ─────────────────────────────────────

/// Fixed (non-learned) stand-in for a video autoencoder: temporal and
/// spatial block average-pooling followed by a fixed random channel lift.
/// Clips whose frame count does not divide the temporal factor are padded
/// by repeating the last frame.
#[derive(Debug, Clone)]
pub struct VaeStub<S> {
    pub temporal: usize,
    pub spatial: usize,
    pub channels: usize,
    lift: Tensor<S>,
}

impl<S: Scalar> VaeStub<S> {
    pub fn init(seed: u64, temporal: usize, spatial: usize, channels: usize) -> Result<Self> {
        if temporal == 0 || spatial == 0 || channels == 0 {
            return Err(PipelineError::Config(
                "vae stub factors and channels must be positive".into(),
            ));
        }
        let mut rng = rngs::derive(seed, tags::VAE, 0);
        Ok(VaeStub {
            temporal,
            spatial,
            channels,
            lift: uniform_init(&[channels, 3], 3, &mut rng),
        })
    }

    pub fn latent_dims(&self, f: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        if h % self.spatial != 0 || w % self.spatial != 0 {
            return Err(PipelineError::Config(format!(
                "clip {h}x{w} not divisible by spatial factor {}",
                self.spatial
            )));
        }
        Ok([
            f.div_ceil(self.temporal),
            h / self.spatial,
            w / self.spatial,
        ])
    }

    /// `[F, H, W, 3] -> [C', F', H', W']`, centered before the lift.
    pub fn encode(&self, clip: &VideoClip<S>) -> Result<Tensor<S>> {
        let (f_n, h, w) = (clip.frames(), clip.height(), clip.width());
        let [f_l, h_l, w_l] = self.latent_dims(f_n, h, w)?;
        let d = clip.tensor.data();
        let frame_stride = h * w * 3;

        // pooled[c][ft][y][x] in f64 for the averaging
        let mut out = vec![S::zero(); self.channels * f_l * h_l * w_l];
        let block = (self.temporal * self.spatial * self.spatial) as f64;
        for ft in 0..f_l {
            for y in 0..h_l {
                for x in 0..w_l {
                    let mut pooled = [0.0f64; 3];
                    for dt in 0..self.temporal {
                        let fr = (ft * self.temporal + dt).min(f_n - 1); // repeat last frame
                        for dy in 0..self.spatial {
                            for dx in 0..self.spatial {
                                let base = fr * frame_stride
                                    + ((y * self.spatial + dy) * w + x * self.spatial + dx) * 3;
                                for c in 0..3 {
                                    pooled[c] += d[base + c].to_f64();
                                }
                            }
                        }
                    }
                    for c in 0..3 {
                        pooled[c] = pooled[c] / block - 0.5;
                    }
                    for co in 0..self.channels {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            acc += self.lift.at(&[co, c]).to_f64() * pooled[c];
                        }
                        out[((co * f_l + ft) * h_l + y) * w_l + x] = S::from_f64(acc);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![self.channels, f_l, h_l, w_l], out)?)
    }
}

// ── denoiser ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    /// Token width.
    pub d_model: usize,
    pub layers: usize,
    /// 1-based block index whose output is tapped for alignment.
    pub tap_layer: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// Patch over the latent grid `(t, h, w)`.
    pub patch: [usize; 3],
    pub latent_channels: usize,
    pub latent_grid: [usize; 3],
    pub n_classes: usize,
    pub t_steps: usize,
}

impl DenoiserConfig {
    pub fn token_grid(&self) -> Result<[usize; 3]> {
        let g = moalign_core::patch::patch_grid(self.latent_grid, self.patch)?;
        Ok(g)
    }

    pub fn patch_numel(&self) -> usize {
        self.latent_channels * self.patch[0] * self.patch[1] * self.patch[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_layer < 1 || self.tap_layer > self.layers {
            return Err(PipelineError::Config(format!(
                "tap_layer {} outside [1, {}]",
                self.tap_layer, self.layers
            )));
        }
        if self.d_model == 0 || self.layers == 0 || self.ff_mult == 0 {
            return Err(PipelineError::Config("denoiser dims must be positive".into()));
        }
        self.token_grid()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct Denoiser<S> {
    pub cfg: DenoiserConfig,
    pub params: ParamGroup<S>,
}

pub struct DenoiserIds {
    ids: Vec<TensorId>,
}

impl DenoiserIds {
    pub fn raw(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn from_raw(ids: Vec<TensorId>) -> Self {
        DenoiserIds { ids }
    }
}

const RMS_EPS: f64 = 1e-6;

impl<S: Scalar> Denoiser<S> {
    pub fn init(seed: u64, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rngs::derive(seed, tags::DENOISER, 0);
        let d = cfg.d_model;
        let pv = cfg.patch_numel();
        let ff = cfg.ff_mult * d;
        let mut p = ParamGroup::new();
        p.push("denoiser.patch.weight", uniform_init::<S>(&[pv, d], pv, &mut rng));
        p.push("denoiser.patch.bias", uniform_init::<S>(&[d], pv, &mut rng));
        p.push(
            "denoiser.time_embed",
            uniform_init::<S>(&[cfg.t_steps + 1, d], d, &mut rng),
        );
        p.push(
            "denoiser.class_embed",
            uniform_init::<S>(&[cfg.n_classes, d], d, &mut rng),
        );
        for l in 0..cfg.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                p.push(
                    format!("denoiser.block{l}.attn.{name}"),
                    uniform_init::<S>(&[d, d], d, &mut rng),
                );
            }
            p.push(
                format!("denoiser.block{l}.attn.bo"),
                uniform_init::<S>(&[d], d, &mut rng),
            );
            p.push(
                format!("denoiser.block{l}.ff.w1"),
                uniform_init::<S>(&[d, ff], d, &mut rng),
            );
            p.push(
                format!("denoiser.block{l}.ff.b1"),
                uniform_init::<S>(&[ff], d, &mut rng),
            );
            p.push(
                format!("denoiser.block{l}.ff.w2"),
                uniform_init::<S>(&[ff, d], ff, &mut rng),
            );
            p.push(
                format!("denoiser.block{l}.ff.b2"),
                uniform_init::<S>(&[d], ff, &mut rng),
            );
        }
        p.push("denoiser.out.weight", uniform_init::<S>(&[d, pv], d, &mut rng));
        p.push("denoiser.out.bias", uniform_init::<S>(&[pv], d, &mut rng));
        Ok(Denoiser { cfg, params: p })
    }

    pub fn from_params(cfg: DenoiserConfig, params: ParamGroup<S>) -> Result<Self> {
        cfg.validate()?;
        Ok(Denoiser { cfg, params })
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> DenoiserIds {
        DenoiserIds {
            ids: self.params.register(tape, trainable),
        }
    }

    /// Predict the noise in `z_t` and expose the tap-layer hidden states.
    ///
    /// Returns `(eps_hat [C', F', H', W'], tap tokens [N, d_model])`. The
    /// tap is a read of an intermediate node, so requesting it never alters
    /// the noise prediction.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        ids: &DenoiserIds,
        z_t: TensorId,
        t: usize,
        class_id: usize,
    ) -> Result<(TensorId, TensorId)> {
        let cfg = &self.cfg;
        if class_id >= cfg.n_classes {
            return Err(PipelineError::Config(format!(
                "unknown condition token {class_id} (have {} classes)",
                cfg.n_classes
            )));
        }
        if t > cfg.t_steps {
            return Err(PipelineError::Config(format!(
                "timestep {t} outside embedding table (0..={})",
                cfg.t_steps
            )));
        }
        let v = &ids.ids;
        let d = cfg.d_model;
        let grid = cfg.token_grid()?;
        let n_tokens = grid[0] * grid[1] * grid[2];

        // ids layout: [patch_w, patch_b, t_table, c_table, blocks..., out_w, out_b]
        let per_block = 9;
        let block_base = 4;
        let out_w = v[block_base + cfg.layers * per_block];
        let out_b = v[block_base + cfg.layers * per_block + 1];

        let tokens = tape.patchify(z_t, cfg.patch)?;
        let mut x = tape.matmul(tokens, v[0])?;
        x = tape.bias_add_cols(x, v[1])?;
        let t_row = tape.embed_row(v[2], t)?;
        let t_vec = tape.reshape(t_row, vec![d])?;
        x = tape.bias_add_cols(x, t_vec)?;
        let c_row = tape.embed_row(v[3], class_id)?;
        let c_vec = tape.reshape(c_row, vec![d])?;
        x = tape.bias_add_cols(x, c_vec)?;

        let scale = S::from_f64(1.0 / (d as f64).sqrt());
        let mut tap = None;
        for l in 0..cfg.layers {
            let b = block_base + l * per_block;
            let (wq, wk, wv, wo, bo) = (v[b], v[b + 1], v[b + 2], v[b + 3], v[b + 4]);
            let (w1, b1, w2, b2) = (v[b + 5], v[b + 6], v[b + 7], v[b + 8]);

            let xn = tape.rms_norm_rows(x, RMS_EPS)?;
            let q = tape.matmul(xn, wq)?;
            let k = tape.matmul(xn, wk)?;
            let val = tape.matmul(xn, wv)?;
            let kt = tape.transpose2(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            let mixed = tape.matmul(attn, val)?;
            let proj = tape.matmul(mixed, wo)?;
            let proj = tape.bias_add_cols(proj, bo)?;
            x = tape.add(x, proj)?;

            let xn2 = tape.rms_norm_rows(x, RMS_EPS)?;
            let h = tape.matmul(xn2, w1)?;
            let h = tape.bias_add_cols(h, b1)?;
            let h = tape.silu(h);
            let f = tape.matmul(h, w2)?;
            let f = tape.bias_add_cols(f, b2)?;
            x = tape.add(x, f)?;

            if l + 1 == cfg.tap_layer {
                tap = Some(x);
            }
        }
        let tap = tap.expect("tap_layer validated in [1, layers]");
        debug_assert_eq!(tape.value(tap).shape(), &[n_tokens, d]);

        let xn = tape.rms_norm_rows(x, RMS_EPS)?;
        let out_tokens = tape.matmul(xn, out_w)?;
        let out_tokens = tape.bias_add_cols(out_tokens, out_b)?;
        let eps_hat = tape.unpatchify(out_tokens, cfg.patch, grid, cfg.latent_channels)?;
        Ok((eps_hat, tap))
    }
}

// ── projection head ────────────────────────────────────────────────

/// Maps tap tokens onto the motion-subspace grid: temporal conv + SiLU,
/// pointwise conv + SiLU, trilinear temporal upsampling, a strided 3x3
/// spatial convolution, and a final exact temporal resize onto the target
/// frame count. The spatial path must land on the target grid exactly;
/// construction rejects geometries where it cannot.
#[derive(Debug, Clone)]
pub struct ProjectionConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub d_m: usize,
    /// Token grid of the tap features.
    pub in_grid: [usize; 3],
    /// Motion-feature grid the output must match.
    pub target_grid: [usize; 3],
    pub temporal_scale: usize,
    pub spatial_stride: usize,
}

impl ProjectionConfig {
    /// Hidden width mirrors the full-scale ratio (input width / 7.5).
    pub fn hidden_for(d_in: usize) -> usize {
        ((d_in as f64 / 7.5).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.d_m == 0 {
            return Err(PipelineError::Config("projection dims must be positive".into()));
        }
        if self.temporal_scale == 0 || self.spatial_stride == 0 {
            return Err(PipelineError::Config(
                "projection scale factors must be positive".into(),
            ));
        }
        let [_, h_in, w_in] = self.in_grid;
        let conv_h = (h_in + 2 - 3) / self.spatial_stride + 1;
        let conv_w = (w_in + 2 - 3) / self.spatial_stride + 1;
        if h_in + 2 < 3 || w_in + 2 < 3 || [conv_h, conv_w] != [self.target_grid[1], self.target_grid[2]]
        {
            return Err(PipelineError::Config(format!(
                "projection cannot map spatial grid {}x{} onto {}x{} with stride {}",
                h_in, w_in, self.target_grid[1], self.target_grid[2], self.spatial_stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Projection<S> {
    pub cfg: ProjectionConfig,
    pub params: ParamGroup<S>,
}

pub struct ProjectionIds {
    ids: Vec<TensorId>,
}

impl ProjectionIds {
    pub fn raw(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn from_raw(ids: Vec<TensorId>) -> Self {
        ProjectionIds { ids }
    }
}

impl<S: Scalar> Projection<S> {
    pub fn init(seed: u64, cfg: ProjectionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rngs::derive(seed, tags::PROJECTION, 0);
        let mut p = ParamGroup::new();
        let fan_t = cfg.d_in * 3;
        p.push(
            "projection.temporal.weight",
            kaiming_uniform::<S>(&[cfg.hidden, cfg.d_in, 3, 1, 1], fan_t, &mut rng),
        );
        p.push("projection.temporal.bias", Tensor::zeros(&[cfg.hidden]));
        p.push(
            "projection.pointwise.weight",
            kaiming_uniform::<S>(&[cfg.d_m, cfg.hidden, 1, 1, 1], cfg.hidden, &mut rng),
        );
        p.push("projection.pointwise.bias", Tensor::zeros(&[cfg.d_m]));
        let fan_s = cfg.d_m * 9;
        p.push(
            "projection.spatial.weight",
            kaiming_uniform::<S>(&[cfg.d_m, cfg.d_m, 1, 3, 3], fan_s, &mut rng),
        );
        p.push("projection.spatial.bias", Tensor::zeros(&[cfg.d_m]));
        Ok(Projection { cfg, params: p })
    }

    pub fn from_params(cfg: ProjectionConfig, params: ParamGroup<S>) -> Result<Self> {
        cfg.validate()?;
        Ok(Projection { cfg, params })
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> ProjectionIds {
        ProjectionIds {
            ids: self.params.register(tape, trainable),
        }
    }

    /// Tap tokens `[N, d_in]` -> aligned tokens `[N_target, d_m]` on the
    /// motion-feature grid.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        ids: &ProjectionIds,
        tap_tokens: TensorId,
    ) -> Result<TensorId> {
        let cfg = &self.cfg;
        let [ft, fh, fw] = cfg.in_grid;
        let s = tape.value(tap_tokens).shape();
        if s != [ft * fh * fw, cfg.d_in] {
            return Err(PipelineError::Config(format!(
                "projection expects [{}, {}] tokens, got {:?}",
                ft * fh * fw,
                cfg.d_in,
                s
            )));
        }
        let v = &ids.ids;
        // tokens [N, d] -> [1, d, ft, fh, fw]
        let grid = tape.reshape(tap_tokens, vec![ft, fh, fw, cfg.d_in])?;
        let x = tape.permute(grid, &[3, 0, 1, 2])?;
        let x = tape.reshape(x, vec![1, cfg.d_in, ft, fh, fw])?;

        let x = tape.conv3d(x, v[0], [1, 1, 1], [1, 0, 0])?;
        let x = tape.bias_add_chan(x, v[1])?;
        let x = tape.silu(x);
        let x = tape.conv3d(x, v[2], [1, 1, 1], [0, 0, 0])?;
        let x = tape.bias_add_chan(x, v[3])?;
        let x = tape.silu(x);
        // temporal upsample, then strided spatial conv
        let x = tape.trilinear(x, [ft * cfg.temporal_scale, fh, fw])?;
        let x = tape.conv3d(x, v[4], [1, cfg.spatial_stride, cfg.spatial_stride], [0, 1, 1])?;
        let x = tape.bias_add_chan(x, v[5])?;
        // reconcile the temporal axis onto the target frame count
        let [gt, gh, gw] = cfg.target_grid;
        let x = tape.trilinear(x, [gt, gh, gw])?;
        // back to tokens [N_target, d_m]
        let x = tape.reshape(x, vec![cfg.d_m, gt, gh, gw])?;
        let x = tape.permute(x, &[1, 2, 3, 0])?;
        tape.reshape(x, vec![gt * gh * gw, cfg.d_m])
            .map_err(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::linear(50);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(50).unwrap() > 0.0);
        for t in 1..=50 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(NoiseSchedule::custom(vec![1.0, 0.5, 0.7]).is_err());
        assert!(NoiseSchedule::custom(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::custom(vec![1.0, 0.5, 0.0]).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let z0 = Tensor::<f64>::from_fn(&[2, 2, 2, 2], |i| i as f64 * 0.3 - 1.0);
        // alpha_bar = 1 at t=1 -> z_t == z0 exactly
        let s = NoiseSchedule::custom(vec![1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (zt, _) = forward_noise(&z0, 1, &s, &mut rng).unwrap();
        assert_eq!(zt.data(), z0.data());
        // alpha_bar -> 0 limit: z_t == eps
        let s = NoiseSchedule::custom(vec![1.0, 1e-300]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (zt, eps) = forward_noise(&z0, 1, &s, &mut rng).unwrap();
        for (a, b) in zt.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        // out-of-range timesteps
        let s = NoiseSchedule::linear(10);
        assert!(forward_noise(&z0, 0, &s, &mut rng).is_err());
        assert!(forward_noise(&z0, 11, &s, &mut rng).is_err());
    }

    #[test]
    fn forward_noise_moments_match_closed_form() {
        // Monte-Carlo oracle: mean ~ sqrt(ab) z0, var ~ (1 - ab)
        let z0 = Tensor::<f64>::new(vec![1], vec![0.8]).unwrap();
        let s = NoiseSchedule::linear(50);
        let t = 20;
        let ab = s.alpha_bar(t).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let (zt, _) = forward_noise(&z0, t, &s, &mut rng).unwrap();
            let v = zt.data()[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let expect_mean = ab.sqrt() * 0.8;
        let expect_var = 1.0 - ab;
        assert!(
            (mean - expect_mean).abs() <= 0.01 * expect_mean.abs().max(1.0),
            "mean {mean} vs {expect_mean}"
        );
        assert!(
            (var - expect_var).abs() <= 0.01 * expect_var,
            "var {var} vs {expect_var}"
        );
    }

    #[test]
    fn diffusion_loss_examples() {
        let a = Tensor::<f64>::from_fn(&[3, 3], |i| i as f64);
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 2.0);
        assert!((diffusion_loss(&b, &a).unwrap() - 4.0).abs() < 1e-12);
        let c = Tensor::<f64>::from_fn(&[3, 3], |i| ((i * 7 % 5) as f64) * 0.4);
        let mut oracle = 0.0;
        for i in 0..9 {
            let d = a.data()[i] - c.data()[i];
            oracle += d * d;
        }
        oracle /= 9.0;
        assert!((diffusion_loss(&a, &c).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn vae_stub_pools_and_lifts() {
        // constant clip -> constant latent per channel
        let stub = VaeStub::<f64>::init(1, 4, 2, 8).unwrap();
        let clip = VideoClip::new(Tensor::full(&[8, 4, 4, 3], 0.5)).unwrap();
        let z = stub.encode(&clip).unwrap();
        assert_eq!(z.shape(), &[8, 2, 2, 2]);
        // pooled value is 0.5 - 0.5 = 0 -> latent identically zero
        assert!(z.data().iter().all(|&v| v.abs() < 1e-12));

        // F = 9 with factor 4 pads to F' = 3
        let clip9 = VideoClip::new(Tensor::full(&[9, 4, 4, 3], 0.25)).unwrap();
        let z9 = stub.encode(&clip9).unwrap();
        assert_eq!(z9.shape(), &[8, 3, 2, 2]);
    }

    #[test]
    fn vae_stub_matches_block_average_oracle() {
        let stub = VaeStub::<f64>::init(2, 2, 2, 4).unwrap();
        let clip = VideoClip::new(Tensor::from_fn(&[4, 4, 4, 3], |i| {
            ((i * 31 % 17) as f64) / 17.0
        }))
        .unwrap();
        let z = stub.encode(&clip).unwrap();
        // oracle: naive block average then lift, fully unrolled
        for co in 0..4 {
            for ft in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        let mut pooled = [0.0f64; 3];
                        for dt in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    for c in 0..3 {
                                        pooled[c] += clip.tensor.at(&[
                                            ft * 2 + dt,
                                            y * 2 + dy,
                                            x * 2 + dx,
                                            c,
                                        ]);
                                    }
                                }
                            }
                        }
                        let mut want = 0.0;
                        for c in 0..3 {
                            want += stub.lift.at(&[co, c]) * (pooled[c] / 8.0 - 0.5);
                        }
                        let got = z.at(&[co, ft, y, x]);
                        assert!((got - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    fn tiny_denoiser_cfg() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            layers: 3,
            tap_layer: 2,
            ff_mult: 2,
            patch: [1, 2, 2],
            latent_channels: 2,
            latent_grid: [2, 4, 4],
            n_classes: 3,
            t_steps: 10,
        }
    }

    #[test]
    fn denoiser_shapes_and_determinism() {
        let cfg = tiny_denoiser_cfg();
        let den = Denoiser::<f64>::init(7, cfg).unwrap();
        let z = Tensor::<f64>::from_fn(&[2, 2, 4, 4], |i| (i % 9) as f64 * 0.1 - 0.4);
        let run = || {
            let mut tape = Tape::new();
            let ids = den.register(&mut tape, false);
            let zid = tape.constant(z.clone());
            let (eps, tap) = den.forward(&mut tape, &ids, zid, 3, 1).unwrap();
            (
                tape.value(eps).data().to_vec(),
                tape.value(tap).data().to_vec(),
                tape.value(eps).shape().to_vec(),
                tape.value(tap).shape().to_vec(),
            )
        };
        let (e1, t1, es, ts) = run();
        let (e2, t2, _, _) = run();
        assert_eq!(es, vec![2, 2, 4, 4]);
        assert_eq!(ts, vec![2 * 2 * 2, 16]);
        // bitwise identical across runs, tap or not
        assert!(e1.iter().zip(&e2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(t1.iter().zip(&t2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unknown_class_rejected_and_tap_validated() {
        let cfg = tiny_denoiser_cfg();
        let den = Denoiser::<f64>::init(8, cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let ids = den.register(&mut tape, false);
        let z = tape.constant(Tensor::zeros(&[2, 2, 4, 4]));
        assert!(den.forward(&mut tape, &ids, z, 1, 5).is_err());

        let mut bad = cfg;
        bad.tap_layer = 9;
        assert!(Denoiser::<f64>::init(9, bad).is_err());
    }

    #[test]
    fn projection_geometry_validation() {
        // desk: tap grid (3,4,6) -> target (3,4,6) with stride 1
        let ok = ProjectionConfig {
            d_in: 16,
            hidden: ProjectionConfig::hidden_for(16),
            d_m: 4,
            in_grid: [3, 4, 6],
            target_grid: [3, 4, 6],
            temporal_scale: 2,
            spatial_stride: 1,
        };
        assert!(ok.validate().is_ok());
        // grid that cannot land on the target is rejected at construction
        let bad = ProjectionConfig {
            spatial_stride: 3,
            ..ok.clone()
        };
        assert!(Projection::<f64>::init(1, bad).is_err());
    }

    #[test]
    fn projection_output_matches_target_grid() {
        let cfg = ProjectionConfig {
            d_in: 16,
            hidden: 4,
            d_m: 5,
            in_grid: [2, 4, 6],
            target_grid: [3, 4, 6],
            temporal_scale: 2,
            spatial_stride: 1,
        };
        let proj = Projection::<f64>::init(2, cfg).unwrap();
        let mut tape = Tape::new();
        let ids = proj.register(&mut tape, false);
        let tap = tape.constant(Tensor::from_fn(&[2 * 4 * 6, 16], |i| (i % 11) as f64 * 0.05));
        let z = proj.forward(&mut tape, &ids, tap).unwrap();
        assert_eq!(tape.value(z).shape(), &[3 * 4 * 6, 5]);

        // zero tap -> finite bias-only output
        let zero = tape.constant(Tensor::zeros(&[2 * 4 * 6, 16]));
        let z0 = proj.forward(&mut tape, &ids, zero).unwrap();
        assert!(tape.value(z0).is_all_finite());
    }
}
