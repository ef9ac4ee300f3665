//! Stage 1: the motion subspace. A two-layer convolutional compressor maps
//! encoder features to a narrow bottleneck; a light convolutional decoder
//! regresses dense optical flow from the bottleneck under a mean-absolute
//! flow loss.

use moalign_core::{Scalar, Tape, Tensor, TensorId};

use crate::encoder::kaiming_uniform;
use crate::error::{PipelineError, Result};
use crate::optim::ParamGroup;
use crate::rngs::{self, tags};
use crate::synthvid::FlowField;

/// Compressor: temporal conv (3,1,1) pad (1,0,0) `d_v -> hidden`, SiLU,
/// pointwise conv `hidden -> d_m`, SiLU. The temporal grid is preserved.
#[derive(Debug, Clone)]
pub struct CompressorConfig {
    pub d_v: usize,
    pub hidden: usize,
    pub d_m: usize,
}

impl CompressorConfig {
    pub fn desk(d_v: usize, d_m: usize) -> Self {
        CompressorConfig {
            d_v,
            hidden: (d_v / 3).max(1),
            d_m,
        }
    }
}

#[derive(Debug)]
pub struct Compressor<S> {
    pub cfg: CompressorConfig,
    pub params: ParamGroup<S>,
}

pub struct CompressorIds {
    ids: Vec<TensorId>,
}

impl CompressorIds {
    pub fn raw(&self) -> &[TensorId] {
        &self.ids
    }

    /// Assemble from already-registered ids, in parameter order.
    pub fn from_raw(ids: Vec<TensorId>) -> Self {
        CompressorIds { ids }
    }
}

impl<S: Scalar> Compressor<S> {
    pub fn init(seed: u64, cfg: CompressorConfig) -> Result<Self> {
        if cfg.d_m >= cfg.d_v {
            return Err(PipelineError::Config(format!(
                "bottleneck requires d_m < d_v, got {} >= {}",
                cfg.d_m, cfg.d_v
            )));
        }
        let mut rng = rngs::derive(seed, tags::COMPRESSOR, 0);
        let mut params = ParamGroup::new();
        let fan1 = cfg.d_v * 3;
        params.push(
            "compressor.temporal.weight",
            kaiming_uniform(&[cfg.hidden, cfg.d_v, 3, 1, 1], fan1, &mut rng),
        );
        params.push("compressor.temporal.bias", Tensor::zeros(&[cfg.hidden]));
        params.push(
            "compressor.pointwise.weight",
            kaiming_uniform(&[cfg.d_m, cfg.hidden, 1, 1, 1], cfg.hidden, &mut rng),
        );
        params.push("compressor.pointwise.bias", Tensor::zeros(&[cfg.d_m]));
        Ok(Compressor { cfg, params })
    }

    pub fn from_params(cfg: CompressorConfig, params: ParamGroup<S>) -> Self {
        Compressor { cfg, params }
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> CompressorIds {
        CompressorIds {
            ids: self.params.register(tape, trainable),
        }
    }

    /// `[1, d_v, F, H, W] -> [1, d_m, F, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        ids: &CompressorIds,
        features: TensorId,
    ) -> Result<TensorId> {
        let in_ch = tape.value(features).shape()[1];
        if in_ch != self.cfg.d_v {
            return Err(PipelineError::Config(format!(
                "compressor expects {} channels, got {in_ch}",
                self.cfg.d_v
            )));
        }
        let [w1, b1, w2, b2] = [ids.ids[0], ids.ids[1], ids.ids[2], ids.ids[3]];
        let x = tape.conv3d(features, w1, [1, 1, 1], [1, 0, 0])?;
        let x = tape.bias_add_chan(x, b1)?;
        let x = tape.silu(x);
        let x = tape.conv3d(x, w2, [1, 1, 1], [0, 0, 0])?;
        let x = tape.bias_add_chan(x, b2)?;
        Ok(tape.silu(x))
    }
}

/// Flow decoder: conv (2,3,3) pad (0,1,1) collapsing one feature frame,
/// two transposed convs for 2x spatial upsampling, a final 3x3x3 conv to
/// two channels, then trilinear resize to the flow target shape.
#[derive(Debug, Clone)]
pub struct FlowDecoderConfig {
    pub d_m: usize,
    /// Channels after the frame-pairing conv.
    pub c_mid: usize,
    /// Channels after the first / second upsampling stage.
    pub c_up1: usize,
    pub c_up2: usize,
    /// Output `(pairs, height, width)` of the predicted flow.
    pub target: [usize; 3],
    /// Fixed gain on the predicted flow. Displacements span several pixels
    /// while a freshly initialized conv stack outputs O(1); the gain keeps
    /// the parameter distance to the targets short.
    pub output_scale: f64,
}

impl FlowDecoderConfig {
    pub fn desk(d_m: usize, target: [usize; 3]) -> Self {
        FlowDecoderConfig {
            d_m,
            c_mid: 2 * d_m,
            c_up1: 2 * d_m,
            c_up2: d_m,
            target,
            output_scale: 8.0,
        }
    }
}

#[derive(Debug)]
pub struct FlowDecoder<S> {
    pub cfg: FlowDecoderConfig,
    pub params: ParamGroup<S>,
}

pub struct FlowDecoderIds {
    ids: Vec<TensorId>,
}

impl FlowDecoderIds {
    pub fn raw(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn from_raw(ids: Vec<TensorId>) -> Self {
        FlowDecoderIds { ids }
    }
}

impl<S: Scalar> FlowDecoder<S> {
    pub fn init(seed: u64, cfg: FlowDecoderConfig) -> Result<Self> {
        let mut rng = rngs::derive(seed, tags::FLOW_DECODER, 0);
        let mut params = ParamGroup::new();
        let fan_pair = cfg.d_m * 2 * 3 * 3;
        params.push(
            "decoder.pair.weight",
            kaiming_uniform(&[cfg.c_mid, cfg.d_m, 2, 3, 3], fan_pair, &mut rng),
        );
        params.push("decoder.pair.bias", Tensor::zeros(&[cfg.c_mid]));
        // transposed-conv kernels are laid out [c_in, c_out, kt, kh, kw];
        // with stride 2 each output collects a quarter of the taps
        let fan_up1 = cfg.c_mid * 4;
        params.push(
            "decoder.up1.weight",
            kaiming_uniform(&[cfg.c_mid, cfg.c_up1, 1, 4, 4], fan_up1, &mut rng),
        );
        params.push("decoder.up1.bias", Tensor::zeros(&[cfg.c_up1]));
        let fan_up2 = cfg.c_up1 * 4;
        params.push(
            "decoder.up2.weight",
            kaiming_uniform(&[cfg.c_up1, cfg.c_up2, 1, 4, 4], fan_up2, &mut rng),
        );
        params.push("decoder.up2.bias", Tensor::zeros(&[cfg.c_up2]));
        let fan_out = cfg.c_up2 * 27;
        params.push(
            "decoder.out.weight",
            kaiming_uniform(&[2, cfg.c_up2, 3, 3, 3], fan_out, &mut rng),
        );
        params.push("decoder.out.bias", Tensor::zeros(&[2]));
        Ok(FlowDecoder { cfg, params })
    }

    pub fn from_params(cfg: FlowDecoderConfig, params: ParamGroup<S>) -> Self {
        FlowDecoder { cfg, params }
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> FlowDecoderIds {
        FlowDecoderIds {
            ids: self.params.register(tape, trainable),
        }
    }

    /// `[1, d_m, F, H, W] -> [1, 2, pairs, H_f, W_f]`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        ids: &FlowDecoderIds,
        motion: TensorId,
    ) -> Result<TensorId> {
        let s = tape.value(motion).shape();
        if s[2] < 2 {
            return Err(PipelineError::Config(format!(
                "flow decoding needs at least 2 feature frames, got {}",
                s[2]
            )));
        }
        if s[1] != self.cfg.d_m {
            return Err(PipelineError::Config(format!(
                "flow decoder expects {} channels, got {}",
                self.cfg.d_m, s[1]
            )));
        }
        let v = &ids.ids;
        let x = tape.conv3d(motion, v[0], [1, 1, 1], [0, 1, 1])?;
        let x = tape.bias_add_chan(x, v[1])?;
        let x = tape.relu(x);
        let x = tape.conv_transpose3d(x, v[2], [1, 2, 2], [0, 1, 1])?;
        let x = tape.bias_add_chan(x, v[3])?;
        let x = tape.relu(x);
        let x = tape.conv_transpose3d(x, v[4], [1, 2, 2], [0, 1, 1])?;
        let x = tape.bias_add_chan(x, v[5])?;
        let x = tape.relu(x);
        let x = tape.conv3d(x, v[6], [1, 1, 1], [1, 1, 1])?;
        let x = tape.bias_add_chan(x, v[7])?;
        let x = tape.scale(x, S::from_f64(self.cfg.output_scale));
        tape.trilinear(x, self.cfg.target).map_err(Into::into)
    }
}

/// Mean absolute error between a flow prediction and its target.
pub fn flow_loss<S: Scalar>(prediction: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    if prediction.shape() != target.shape() {
        return Err(PipelineError::Config(format!(
            "flow_loss shape mismatch: {:?} vs {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let n = prediction.numel();
    let mut acc = S::zero();
    for (a, b) in prediction.data().iter().zip(target.data()) {
        acc = acc + (*a - *b).abs();
    }
    Ok(acc / S::from_f64(n as f64))
}

/// Tape form of the flow loss: `mean |pred - target|`.
pub fn flow_loss_on(
    tape: &mut Tape<impl Scalar>,
    prediction: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    if tape.value(prediction).shape() != tape.value(target).shape() {
        return Err(PipelineError::Config(format!(
            "flow_loss shape mismatch: {:?} vs {:?}",
            tape.value(prediction).shape(),
            tape.value(target).shape()
        )));
    }
    let d = tape.sub(prediction, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean endpoint error: per-pixel Euclidean distance between `(u, v)`
/// vectors, averaged over all pixels. Inputs are `[pairs, 2, H, W]`.
pub fn epe<S: Scalar>(prediction: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(PipelineError::Config(format!(
            "epe shape mismatch: {:?} vs {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let s = prediction.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(PipelineError::Config(format!(
            "epe expects [pairs, 2, H, W], got {s:?}"
        )));
    }
    let (pairs, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let (p, t) = (prediction.data(), target.data());
    let mut acc = 0.0f64;
    for f in 0..pairs {
        let base = f * 2 * plane;
        for i in 0..plane {
            let du = (p[base + i].to_f64()) - (t[base + i].to_f64());
            let dv = (p[base + plane + i].to_f64()) - (t[base + plane + i].to_f64());
            acc += (du * du + dv * dv).sqrt();
        }
    }
    Ok(acc / (pairs * plane) as f64)
}

/// Supervision target for feature-frame pairs, derived from the stored
/// consecutive flow: pair `k` is `t_patch` times the flow at the center
/// frame of patch `k`. Exact for constant translation; for rotation the
/// small-angle composition error stays well under the renderer tolerance at
/// the permitted angular rates. Output is `[n_pairs, 2, H, W]` -- the same
/// layout the decoder produces after its `[1, 2, T, H, W] -> [T, 2, H, W]`
/// permute.
pub fn stage1_flow_target<S: Scalar>(
    flow: &FlowField<S>,
    t_patch: usize,
    n_pairs: usize,
) -> Result<Tensor<S>> {
    let (h, w) = (flow.height(), flow.width());
    let need = (n_pairs - 1) * t_patch + (t_patch - 1) / 2;
    if n_pairs == 0 || need >= flow.pairs() {
        return Err(PipelineError::Config(format!(
            "flow target needs consecutive pair {need}, field has {}",
            flow.pairs()
        )));
    }
    let scale = S::from_f64(t_patch as f64);
    let d = flow.tensor.data();
    let plane = 2 * h * w;
    Ok(Tensor::from_fn(&[n_pairs, 2, h, w], |i| {
        let k = i / plane;
        let rest = i % plane;
        let src = k * t_patch + (t_patch - 1) / 2;
        d[src * plane + rest] * scale
    }))
}

/// Reorder a decoder output `[1, 2, T, H, W]` into flow layout
/// `[T, 2, H, W]`.
pub fn to_flow_layout<S: Scalar>(pred: &Tensor<S>) -> Result<Tensor<S>> {
    let s = pred.shape().to_vec();
    if s.len() != 5 || s[0] != 1 || s[1] != 2 {
        return Err(PipelineError::Config(format!(
            "expected [1, 2, T, H, W], got {s:?}"
        )));
    }
    let squeezed = pred.reshaped(vec![s[1], s[2], s[3], s[4]])?;
    Ok(squeezed.permuted(&[1, 0, 2, 3])?)
}

/// Flow-layout target `[T, 2, H, W]` into decoder layout `[1, 2, T, H, W]`.
pub fn to_decoder_layout<S: Scalar>(target: &Tensor<S>) -> Result<Tensor<S>> {
    let s = target.shape().to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(PipelineError::Config(format!(
            "expected [T, 2, H, W], got {s:?}"
        )));
    }
    let p = target.permuted(&[1, 0, 2, 3])?;
    Ok(p.reshaped(vec![1, 2, s[0], s[2], s[3]])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_enforced() {
        assert!(Compressor::<f64>::init(
            1,
            CompressorConfig {
                d_v: 16,
                hidden: 8,
                d_m: 16
            }
        )
        .is_err());
    }

    #[test]
    fn compressor_shapes_desk() {
        // (3,4,6,96) in -> (3,4,6,16) out with d_m = 16
        let cfg = CompressorConfig::desk(96, 16);
        let comp = Compressor::<f64>::init(1, cfg).unwrap();
        let mut tape = Tape::new();
        let ids = comp.register(&mut tape, false);
        let s = tape.constant(Tensor::from_fn(&[1, 96, 3, 4, 6], |i| (i % 13) as f64 * 0.01));
        let m = comp.forward(&mut tape, &ids, s).unwrap();
        assert_eq!(tape.value(m).shape(), &[1, 16, 3, 4, 6]);
    }

    #[test]
    fn zero_features_give_bias_constant_grid() {
        let cfg = CompressorConfig::desk(12, 4);
        let comp = Compressor::<f64>::init(2, cfg).unwrap();
        let mut tape = Tape::new();
        let ids = comp.register(&mut tape, false);
        let s = tape.constant(Tensor::zeros(&[1, 12, 3, 2, 2]));
        let m = comp.forward(&mut tape, &ids, s).unwrap();
        let v = tape.value(m);
        // constant per channel across the whole grid
        let inner = 3 * 2 * 2;
        for c in 0..4 {
            let first = v.data()[c * inner];
            for k in 1..inner {
                assert_eq!(v.data()[c * inner + k], first);
            }
        }
    }

    #[test]
    fn decoder_desk_shape() {
        // M (3,4,6,16) -> flow (2,2,32,48) after resize
        let cfg = FlowDecoderConfig::desk(16, [2, 32, 48]);
        let dec = FlowDecoder::<f64>::init(3, cfg).unwrap();
        let mut tape = Tape::new();
        let ids = dec.register(&mut tape, false);
        let m = tape.constant(Tensor::from_fn(&[1, 16, 3, 4, 6], |i| (i % 7) as f64 * 0.1));
        let y = dec.forward(&mut tape, &ids, m).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 32, 48]);
        let flow = to_flow_layout(tape.value(y)).unwrap();
        assert_eq!(flow.shape(), &[2, 2, 32, 48]);
    }

    #[test]
    fn decoder_rejects_single_frame() {
        let cfg = FlowDecoderConfig::desk(8, [1, 8, 8]);
        let dec = FlowDecoder::<f64>::init(3, cfg).unwrap();
        let mut tape = Tape::new();
        let ids = dec.register(&mut tape, false);
        let m = tape.constant(Tensor::zeros(&[1, 8, 1, 2, 2]));
        assert!(dec.forward(&mut tape, &ids, m).is_err());
    }

    #[test]
    fn zero_motion_gives_finite_bias_flow() {
        let cfg = FlowDecoderConfig::desk(8, [2, 16, 16]);
        let dec = FlowDecoder::<f64>::init(4, cfg).unwrap();
        let mut tape = Tape::new();
        let ids = dec.register(&mut tape, false);
        let m = tape.constant(Tensor::zeros(&[1, 8, 3, 4, 4]));
        let y = dec.forward(&mut tape, &ids, m).unwrap();
        assert!(tape.value(y).is_all_finite());
    }

    #[test]
    fn flow_loss_examples() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| i as f64 * 0.1);
        assert_eq!(flow_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((flow_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        // brute-force oracle on a random pair
        let c = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| ((i * 29 % 11) as f64) * 0.3 - 1.0);
        let mut oracle = 0.0;
        for i in 0..c.numel() {
            oracle += (a.data()[i] - c.data()[i]).abs();
        }
        oracle /= c.numel() as f64;
        assert!((flow_loss(&a, &c).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn epe_examples() {
        let t = Tensor::<f64>::from_fn(&[2, 2, 4, 4], |i| (i % 5) as f64);
        assert_eq!(epe(&t, &t).unwrap(), 0.0);
        // constant (3,4) offset -> 5.0 everywhere
        let shifted = Tensor::<f64>::from_fn(&[2, 2, 4, 4], |i| {
            let plane = 16;
            let ch = (i / plane) % 2;
            t.data()[i] + if ch == 0 { 3.0 } else { 4.0 }
        });
        assert!((epe(&shifted, &t).unwrap() - 5.0).abs() < 1e-12);
        // brute-force oracle on a random pair
        let p = Tensor::<f64>::from_fn(&[2, 2, 4, 4], |i| ((i * 13 % 23) as f64) * 0.21);
        let mut oracle = 0.0;
        for f in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let du = p.at(&[f, 0, y, x]) - t.at(&[f, 0, y, x]);
                    let dv = p.at(&[f, 1, y, x]) - t.at(&[f, 1, y, x]);
                    oracle += (du * du + dv * dv).sqrt();
                }
            }
        }
        oracle /= 32.0;
        assert!((epe(&p, &t).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn flow_target_scales_center_frame() {
        // patch 3, F = 9: pair 0 reads flow[1] * 3, pair 1 reads flow[4] * 3
        let flow = FlowField::new(Tensor::<f64>::from_fn(&[8, 2, 2, 2], |i| {
            (i / 8) as f64 // value = consecutive-pair index
        }))
        .unwrap();
        let target = stage1_flow_target(&flow, 3, 2).unwrap();
        assert_eq!(target.shape(), &[2, 2, 2, 2]);
        assert_eq!(target.at(&[0, 0, 0, 0]), 3.0); // 3 * flow[1]
        assert_eq!(target.at(&[1, 0, 0, 0]), 12.0); // 3 * flow[4]
    }
}
