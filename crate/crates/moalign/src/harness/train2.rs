//! Stage-2 training: fine-tune the toy diffusion denoiser jointly on the
//! denoising objective and (per loss mode) an alignment objective whose
//! target is the frozen motion subspace from stage 1. Only the denoiser,
//! the projection head, and (in feature-matching mode) the projector learn;
//! the encoder and the stage-1 compressor are frozen and hashed.

use std::path::Path;
use std::time::Instant;

use moalign_core::{Tape, Tensor};
use rand::Rng;

use super::{group_hashes, load_dataset, write_freeze_file, BatchSampler, RunArtifacts};
use crate::align::{
    precompute_align_targets, repa_loss_on, soft_trd_loss_on, total_loss_on, AlignTargets,
    RepaProjector, Tau,
};
use crate::config::{LossMode, TrainConfig};
use crate::diffusion::{diffusion_loss_on, forward_noise, Denoiser, NoiseSchedule, Projection, VaeStub};
use crate::encoder::Encoder;
use crate::error::{PipelineError, Result};
use crate::features::FeatureGrid;
use crate::metrics::{MetricsWriter, StepRecord};
use crate::motion::Compressor;
use crate::optim::{grad_norm, AdamW, AdamWConfig, GradAccum, ParamGroup};
use crate::rngs::{self, tags};

pub fn train_stage2(cfg: &TrainConfig, stage1_ckpt: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(PipelineError::Config(format!(
            "train_stage2 called with stage = {}",
            cfg.stage
        )));
    }
    if cfg.loss_mode.needs_stage1() && stage1_ckpt.is_none() {
        return Err(PipelineError::Config(format!(
            "loss mode {} requires a stage-1 checkpoint",
            cfg.loss_mode.name()
        )));
    }
    let manifest = cfg.manifest.as_ref().ok_or_else(|| {
        PipelineError::Config("stage-2 training needs [data] manifest".into())
    })?;
    let data = load_dataset(manifest)?;
    let grid = cfg.feature_grid()?;

    // frozen pieces
    let encoder = Encoder::<f32>::init(cfg.seed, cfg.encoder_config())?;
    let vae = VaeStub::<f32>::init(cfg.seed, cfg.vae_temporal, cfg.vae_spatial, cfg.latent_channels)?;
    let schedule = NoiseSchedule::linear(cfg.t_steps);

    // stage-1 weights (frozen) when the mode aligns to the motion subspace
    let (compressor, decoder_group) = match stage1_ckpt {
        Some(dir) => {
            let ck = super::ckpt::load_checkpoint(dir)?;
            if ck.meta.stage != 1 {
                return Err(PipelineError::Checkpoint {
                    path: dir.to_path_buf(),
                    msg: format!("expected a stage-1 checkpoint, found stage {}", ck.meta.stage),
                });
            }
            let psi = ck.group("compressor.")?;
            let comp = Compressor::from_params(cfg.compressor_config(), psi);
            if comp.params.get("compressor.temporal.weight").map(|t| t.shape()[1])
                != Some(cfg.d_v)
            {
                return Err(PipelineError::Checkpoint {
                    path: dir.to_path_buf(),
                    msg: "checkpoint dims do not match the configured model".into(),
                });
            }
            let omega = ck.group("decoder.").ok();
            (Some(comp), omega)
        }
        None => (None, None),
    };

    // trainable pieces
    let mut denoiser = Denoiser::<f32>::init(cfg.seed, cfg.denoiser_config()?)?;
    let mut projection = Projection::<f32>::init(cfg.seed, cfg.projection_config()?)?;
    let mut repa = RepaProjector::<f32>::init(cfg.seed, cfg.d_model, cfg.d_v);

    // per-clip precomputation: latents, class ids, alignment targets
    let mut latents = Vec::with_capacity(data.len());
    let mut classes = Vec::with_capacity(data.len());
    for item in &data {
        latents.push(vae.encode(&item.clip)?);
        if item.label.class_id >= cfg.n_classes {
            return Err(PipelineError::Config(format!(
                "clip class {} exceeds n_classes {}",
                item.label.class_id, cfg.n_classes
            )));
        }
        classes.push(item.label.class_id);
    }
    let tau = match cfg.loss_mode {
        LossMode::Trd => Tau::Infinite,
        _ => cfg.tau,
    };
    let mut align_targets: Vec<AlignTargets<f32>> = Vec::new();
    let mut teachers: Vec<Tensor<f32>> = Vec::new();
    match cfg.loss_mode {
        LossMode::SoftTrd | LossMode::Trd => {
            let comp = compressor.as_ref().expect("checked above");
            for item in &data {
                let s = encoder.encode(&item.clip)?;
                let mut tape = Tape::<f32>::new();
                let ids = comp.register(&mut tape, false);
                let sid = tape.constant(s.to_conv_layout());
                let m = comp.forward(&mut tape, &ids, sid)?;
                let m_grid = FeatureGrid::from_conv_layout(tape.value(m))?;
                align_targets.push(precompute_align_targets(
                    &m_grid.token_matrix(),
                    grid,
                    tau,
                    cfg.eps,
                )?);
            }
        }
        LossMode::Repa => {
            let tap_grid = cfg.denoiser_config()?.token_grid()?;
            let n_tap = tap_grid[0] * tap_grid[1] * tap_grid[2];
            let n_teacher = grid[0] * grid[1] * grid[2];
            if n_tap != n_teacher {
                return Err(PipelineError::Config(format!(
                    "feature-matching mode needs equal token counts (tap {n_tap}, teacher {n_teacher})"
                )));
            }
            for item in &data {
                teachers.push(encoder.encode(&item.clip)?.token_matrix());
            }
        }
        LossMode::None => {}
    }

    // freeze ledger inputs
    let encoder_group = {
        let mut g = ParamGroup::new();
        for (name, t) in encoder.tensors() {
            g.push(name, t.clone());
        }
        g
    };
    let mut frozen_list: Vec<(&str, &ParamGroup<f32>)> = vec![("encoder", &encoder_group)];
    if let Some(comp) = compressor.as_ref() {
        frozen_list.push(("compressor", &comp.params));
    }
    if let Some(omega) = decoder_group.as_ref() {
        frozen_list.push(("decoder", omega));
    }
    let frozen_before = group_hashes(&frozen_list);

    let opt_cfg = AdamWConfig {
        lr: cfg.lr(),
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        eps: 1e-8,
    };
    let mut opt_theta = AdamW::new(opt_cfg, &denoiser.params);
    let mut opt_zeta = AdamW::new(opt_cfg, &projection.params);
    let mut opt_phi = AdamW::new(opt_cfg, &repa.params);

    std::fs::create_dir_all(&cfg.out).map_err(|e| PipelineError::io(&cfg.out, e))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut sampler = BatchSampler::new(cfg.seed, data.len());

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch = sampler.next_batch(cfg.batch);
        let mut acc_theta = GradAccum::new(&denoiser.params);
        let mut acc_zeta = GradAccum::new(&projection.params);
        let mut acc_phi = GradAccum::new(&repa.params);
        let (mut diff_sum, mut align_sum, mut total_sum) = (0.0f64, 0.0f64, 0.0f64);

        for (slot, &idx) in batch.iter().enumerate() {
            let draw = (step * cfg.batch + slot) as u64;
            let t = rngs::derive(cfg.seed, tags::TIMESTEP, draw).gen_range(1..=cfg.t_steps);
            let mut noise_rng = rngs::derive(cfg.seed, tags::NOISE, draw);
            let (z_t, eps) = forward_noise(&latents[idx], t, &schedule, &mut noise_rng)?;

            let mut tape = Tape::<f32>::new();
            let den_ids = denoiser.register(&mut tape, true);
            let z_id = tape.constant(z_t);
            let (eps_hat, tap) = denoiser.forward(&mut tape, &den_ids, z_id, t, classes[idx])?;
            let eps_id = tape.constant(eps);
            let l_diff = diffusion_loss_on(&mut tape, eps_hat, eps_id)?;

            match cfg.loss_mode {
                LossMode::None => {
                    run_backward(&mut tape, l_diff, step)?;
                    acc_theta.add(&denoiser.params.grads_from(&tape, den_ids.raw()));
                    record(&tape, l_diff, l_diff, &mut diff_sum, &mut total_sum);
                }
                LossMode::SoftTrd | LossMode::Trd => {
                    let proj_ids = projection.register(&mut tape, true);
                    let z_tokens = projection.forward(&mut tape, &proj_ids, tap)?;
                    let l_align = soft_trd_loss_on(
                        &mut tape,
                        z_tokens,
                        &align_targets[idx],
                        cfg.temporal_norm,
                        cfg.block_rows,
                        cfg.eps,
                    )?;
                    let total = total_loss_on(&mut tape, l_diff, l_align, cfg.lambda)?;
                    align_sum += tape.value(l_align).data()[0] as f64;
                    run_backward(&mut tape, total, step)?;
                    acc_theta.add(&denoiser.params.grads_from(&tape, den_ids.raw()));
                    acc_zeta.add(&projection.params.grads_from(&tape, proj_ids.raw()));
                    record(&tape, total, l_diff, &mut diff_sum, &mut total_sum);
                }
                LossMode::Repa => {
                    let phi_ids = repa.register(&mut tape, true);
                    let projected = repa.apply(&mut tape, &phi_ids, tap)?;
                    let teacher = tape.constant(teachers[idx].clone());
                    let l_align = repa_loss_on(&mut tape, teacher, projected, cfg.eps)?;
                    let total = total_loss_on(&mut tape, l_diff, l_align, cfg.lambda)?;
                    align_sum += tape.value(l_align).data()[0] as f64;
                    run_backward(&mut tape, total, step)?;
                    acc_theta.add(&denoiser.params.grads_from(&tape, den_ids.raw()));
                    acc_phi.add(&repa.params.grads_from(&tape, phi_ids.raw()));
                    record(&tape, total, l_diff, &mut diff_sum, &mut total_sum);
                }
            }
        }

        let g_theta = acc_theta.mean();
        let gn = match cfg.loss_mode {
            LossMode::SoftTrd | LossMode::Trd => {
                let g_zeta = acc_zeta.mean();
                let mut all = g_theta.clone();
                all.extend(g_zeta.clone());
                let gn = grad_norm(&all);
                opt_zeta.step(&mut projection.params, &g_zeta)?;
                gn
            }
            LossMode::Repa => {
                let g_phi = acc_phi.mean();
                let mut all = g_theta.clone();
                all.extend(g_phi.clone());
                let gn = grad_norm(&all);
                opt_phi.step(&mut repa.params, &g_phi)?;
                gn
            }
            LossMode::None => grad_norm(&g_theta),
        };
        opt_theta.step(&mut denoiser.params, &g_theta)?;

        let b = batch.len() as f64;
        metrics.write(&StepRecord {
            step,
            loss_diff: diff_sum / b,
            loss_align: align_sum / b,
            loss_flow: 0.0,
            loss_total: total_sum / b,
            grad_norm: gn,
            wall_ms: if cfg.deterministic {
                0.0
            } else {
                t0.elapsed().as_secs_f64() * 1e3
            },
        })?;
    }
    metrics.finish()?;

    // artifacts: the checkpoint embeds the frozen stage-1 tensors so that
    // evaluation is self-contained
    let ckpt_dir = cfg.out.join("checkpoint");
    let mut groups: Vec<&ParamGroup<f32>> = vec![&denoiser.params, &projection.params];
    if matches!(cfg.loss_mode, LossMode::Repa) {
        groups.push(&repa.params);
    }
    if let Some(comp) = compressor.as_ref() {
        groups.push(&comp.params);
    }
    if let Some(omega) = decoder_group.as_ref() {
        groups.push(omega);
    }
    super::ckpt::save_checkpoint(
        &ckpt_dir,
        2,
        cfg.steps,
        &cfg.to_ini(),
        &groups,
        serde_json::json!({
            "train_manifest": manifest.display().to_string(),
            "encoder_seed": cfg.seed,
            "loss_mode": cfg.loss_mode.name(),
            "stage1_ckpt": stage1_ckpt.map(|p| p.display().to_string()),
        }),
    )?;
    let resolved_config = cfg.out.join("resolved_config.ini");
    std::fs::write(&resolved_config, cfg.to_ini())
        .map_err(|e| PipelineError::io(&resolved_config, e))?;

    let frozen_after = group_hashes(&frozen_list);
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

fn run_backward(tape: &mut Tape<f32>, loss: moalign_core::TensorId, step: usize) -> Result<()> {
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(PipelineError::NonFiniteLoss { step, value });
    }
    tape.backward(loss)?;
    Ok(())
}

fn record(
    tape: &Tape<f32>,
    total: moalign_core::TensorId,
    diff: moalign_core::TensorId,
    diff_sum: &mut f64,
    total_sum: &mut f64,
) {
    *diff_sum += tape.value(diff).data()[0] as f64;
    *total_sum += tape.value(total).data()[0] as f64;
}
