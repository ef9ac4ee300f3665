//! Stage-1 training: regress ground-truth optical flow from compressed
//! encoder features. Only the compressor and flow decoder learn; the
//! encoder stays frozen and its features are precomputed once per clip.

use std::time::Instant;

use moalign_core::{Tape, Tensor};

use super::{group_hashes, load_dataset, write_freeze_file, BatchSampler, RunArtifacts};
use crate::config::TrainConfig;
use crate::encoder::Encoder;
use crate::error::{PipelineError, Result};
use crate::metrics::{MetricsWriter, StepRecord};
use crate::motion::{
    flow_loss_on, stage1_flow_target, to_decoder_layout, Compressor, FlowDecoder,
};
use crate::optim::{grad_norm, AdamW, AdamWConfig, GradAccum, ParamGroup};

pub fn train_stage1(cfg: &TrainConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(PipelineError::Config(format!(
            "train_stage1 called with stage = {}",
            cfg.stage
        )));
    }
    let manifest = cfg.manifest.as_ref().ok_or_else(|| {
        PipelineError::Config("stage-1 training needs [data] manifest".into())
    })?;
    let data = load_dataset(manifest)?;
    let grid = cfg.feature_grid()?;
    let flow_dims = cfg.flow_target_dims()?;

    let encoder = Encoder::<f32>::init(cfg.seed, cfg.encoder_config())?;
    let encoder_group = {
        let mut g = ParamGroup::new();
        for (name, t) in encoder.tensors() {
            g.push(name, t.clone());
        }
        g
    };
    let frozen_before = group_hashes(&[("encoder", &encoder_group)]);

    // precompute frozen features and flow targets per clip
    let mut features = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for item in &data {
        let s = encoder.encode(&item.clip)?;
        features.push(s.to_conv_layout());
        let t = stage1_flow_target(&item.flow, cfg.patch[0], flow_dims[0])?;
        // resize targets spatially if the configured flow resolution differs
        let t = if [t.shape()[2], t.shape()[3]] == [flow_dims[1], flow_dims[2]] {
            t
        } else {
            let conv = to_decoder_layout(&t)?;
            let resized = moalign_core::interp::trilinear(&conv, flow_dims)?;
            crate::motion::to_flow_layout(&resized)?
        };
        targets.push(to_decoder_layout(&t)?);
    }

    let compressor = Compressor::<f32>::init(cfg.seed, cfg.compressor_config())?;
    let decoder = FlowDecoder::<f32>::init(cfg.seed, cfg.flow_decoder_config()?)?;
    let mut compressor = compressor;
    let mut decoder = decoder;

    let opt_cfg = AdamWConfig {
        lr: cfg.lr(),
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        eps: 1e-8,
    };
    let mut opt_psi = AdamW::new(opt_cfg, &compressor.params);
    let mut opt_omega = AdamW::new(opt_cfg, &decoder.params);

    std::fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut sampler = BatchSampler::new(cfg.seed, data.len());

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch = sampler.next_batch(cfg.batch);
        let mut acc_psi = GradAccum::new(&compressor.params);
        let mut acc_omega = GradAccum::new(&decoder.params);
        let mut loss_sum = 0.0f64;
        for &idx in &batch {
            let mut tape = Tape::<f32>::new();
            let cids = compressor.register(&mut tape, true);
            let dids = decoder.register(&mut tape, true);
            let s = tape.constant(features[idx].clone());
            let m = compressor.forward(&mut tape, &cids, s)?;
            let pred = decoder.forward(&mut tape, &dids, m)?;
            let tgt = tape.constant(targets[idx].clone());
            let loss = flow_loss_on(&mut tape, pred, tgt)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(PipelineError::NonFiniteLoss { step, value });
            }
            loss_sum += value;
            tape.backward(loss)?;
            let ids = cids.raw();
            acc_psi.add(&compressor.params.grads_from(&tape, ids));
            acc_omega.add(&decoder.params.grads_from(&tape, dids.raw()));
        }
        let g_psi = acc_psi.mean();
        let g_omega = acc_omega.mean();
        let gn = {
            let mut all: Vec<Tensor<f32>> = g_psi.clone();
            all.extend(g_omega.clone());
            grad_norm(&all)
        };
        opt_psi.step(&mut compressor.params, &g_psi)?;
        opt_omega.step(&mut decoder.params, &g_omega)?;

        let loss_flow = loss_sum / batch.len() as f64;
        metrics.write(&StepRecord {
            step,
            loss_diff: 0.0,
            loss_align: 0.0,
            loss_flow,
            loss_total: loss_flow,
            grad_norm: gn,
            wall_ms: if cfg.deterministic {
                0.0
            } else {
                t0.elapsed().as_secs_f64() * 1e3
            },
        })?;
    }
    metrics.finish()?;

    // artifacts
    let ckpt_dir = cfg.out.join("checkpoint");
    super::ckpt::save_checkpoint(
        &ckpt_dir,
        1,
        cfg.steps,
        &cfg.to_ini(),
        &[&compressor.params, &decoder.params],
        serde_json::json!({
            "train_manifest": manifest.display().to_string(),
            "encoder_seed": cfg.seed,
            "feature_grid": grid,
            "flow_target": flow_dims,
        }),
    )?;
    let resolved_config = cfg.out.join("resolved_config.ini");
    std::fs::write(&resolved_config, cfg.to_ini())
        .map_err(|e| PipelineError::io(&resolved_config, e))?;

    let frozen_after = group_hashes(&[("encoder", &encoder_group)]);
    let freeze_path = cfg.out.join("freeze_hashes.txt");
    write_freeze_file(&freeze_path, &frozen_before, &frozen_after)?;

    Ok(RunArtifacts {
        out_dir: cfg.out.clone(),
        metrics_path,
        ckpt_dir,
        resolved_config,
        freeze_path,
    })
}
