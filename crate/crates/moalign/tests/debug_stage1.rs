//! Diagnostic scaffold (run with `-- --ignored --nocapture`): per-layer
//! activation statistics of a trained stage-1 checkpoint.

use moalign::config::TrainConfig;
use moalign::encoder::Encoder;
use moalign::harness::{ckpt::load_checkpoint, load_dataset};
use moalign::motion::{Compressor, FlowDecoder};
use moalign_core::{Tape, Tensor};

fn stats(name: &str, t: &Tensor<f32>) {
    let d = t.data();
    let n = d.len() as f32;
    let mean = d.iter().sum::<f32>() / n;
    let mn = d.iter().cloned().fold(f32::INFINITY, f32::min);
    let mx = d.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let frac_pos = d.iter().filter(|v| **v > 0.0).count() as f32 / n;
    let mean_abs = d.iter().map(|v| v.abs()).sum::<f32>() / n;
    println!(
        "{name:24} shape {:?} mean {mean:+.4} |mean| {mean_abs:.4} min {mn:+.4} max {mx:+.4} frac>0 {frac_pos:.3}",
        t.shape()
    );
}

#[test]
#[ignore]
fn dump_stage1_activations() {
    let ckpt = std::env::var("CKPT").expect("set CKPT=dir");
    let manifest = std::env::var("MANIFEST").expect("set MANIFEST=path");
    let ck = load_checkpoint(std::path::Path::new(&ckpt)).unwrap();
    let cfg = TrainConfig::from_ini(&ck.meta.config_ini).unwrap();
    let data = load_dataset(std::path::Path::new(&manifest)).unwrap();
    let encoder = Encoder::<f32>::init(cfg.seed, cfg.encoder_config()).unwrap();
    let comp = Compressor::from_params(cfg.compressor_config(), ck.group("compressor.").unwrap());
    let dec =
        FlowDecoder::from_params(cfg.flow_decoder_config().unwrap(), ck.group("decoder.").unwrap());

    for (name, t) in comp.params.iter().chain(dec.params.iter()) {
        stats(name, t);
    }

    let s = encoder.encode(&data[0].clip).unwrap();
    stats("S features", s.tensor());

    let mut tape = Tape::<f32>::new();
    let cids = comp.register(&mut tape, false);
    let sid = tape.constant(s.to_conv_layout());
    let m = comp.forward(&mut tape, &cids, sid).unwrap();
    stats("M features", tape.value(m));

    // decoder layer by layer
    let v: Vec<_> = dec.params.register(&mut tape, false);
    let x = tape.conv3d(m, v[0], [1, 1, 1], [0, 1, 1]).unwrap();
    let x = tape.bias_add_chan(x, v[1]).unwrap();
    stats("pair conv (pre-relu)", tape.value(x));
    let x = tape.relu(x);
    stats("pair conv (post)", tape.value(x));
    let x = tape.conv_transpose3d(x, v[2], [1, 2, 2], [0, 1, 1]).unwrap();
    let x = tape.bias_add_chan(x, v[3]).unwrap();
    stats("up1 (pre-relu)", tape.value(x));
    let x = tape.relu(x);
    let x = tape.conv_transpose3d(x, v[4], [1, 2, 2], [0, 1, 1]).unwrap();
    let x = tape.bias_add_chan(x, v[5]).unwrap();
    stats("up2 (pre-relu)", tape.value(x));
    let x = tape.relu(x);
    let x = tape.conv3d(x, v[6], [1, 1, 1], [1, 1, 1]).unwrap();
    let x = tape.bias_add_chan(x, v[7]).unwrap();
    stats("out conv", tape.value(x));
    let target = moalign::motion::stage1_flow_target(&data[0].flow, cfg.patch[0], 2).unwrap();
    stats("target", &target);
}

// FlowDecoder ids are opaque; re-register through the raw path for probing.
trait RawReg {
    fn register(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<moalign_core::TensorId>;
}

impl RawReg for FlowDecoder<f32> {
    fn register(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<moalign_core::TensorId> {
        self.params.register(tape, trainable)
    }
}
