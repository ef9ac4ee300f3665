//! Held-out evaluation. Stage-1 checkpoints report flow endpoint error
//! against the zero-flow baseline plus disentanglement probe scores;
//! stage-2 checkpoints report the denoising loss and the relational
//! distance between aligned and motion similarity structures.

use std::path::{Path, PathBuf};

use moalign_core::Tape;
use rand::Rng;

use super::ckpt::load_checkpoint;
use super::load_dataset;
use crate::align::{spatial_similarity, temporal_similarity};
use crate::config::TrainConfig;
use crate::diffusion::{diffusion_loss_on, forward_noise, Denoiser, NoiseSchedule, Projection, VaeStub};
use crate::encoder::Encoder;
use crate::error::{PipelineError, Result};
use crate::features::FeatureGrid;
use crate::metrics::write_eval_csv;
use crate::motion::{epe, stage1_flow_target, to_flow_layout, Compressor, FlowDecoder};
use crate::rngs;
use crate::synthvid::read_manifest;

const EVAL_TAG: u64 = 0x0D;

/// Evaluate a checkpoint on a held-out manifest; writes `eval.csv` under
/// `out_dir` and returns its path.
pub fn evaluate(ckpt_dir: &Path, manifest: &Path, out_dir: &Path) -> Result<PathBuf> {
    let ck = load_checkpoint(ckpt_dir)?;
    let cfg = TrainConfig::from_ini(&ck.meta.config_ini)?;
    let data = load_dataset(manifest)?;
    let mut warnings = Vec::new();

    // manifest overlap: warn when any held-out clip file also appears in
    // the checkpoint's training manifest
    if let Some(train_manifest) = ck.meta.extra.get("train_manifest").and_then(|v| v.as_str()) {
        let tm = PathBuf::from(train_manifest);
        if tm.exists() {
            if let Ok(train_entries) = read_manifest(&tm) {
                let train_set: std::collections::BTreeSet<PathBuf> = train_entries
                    .iter()
                    .filter_map(|e| e.clip_path.canonicalize().ok())
                    .collect();
                let overlap = read_manifest(manifest)?
                    .iter()
                    .filter_map(|e| e.clip_path.canonicalize().ok())
                    .filter(|p| train_set.contains(p))
                    .count();
                if overlap > 0 {
                    warnings.push(format!(
                        "{overlap} clips of the eval manifest also appear in the training manifest"
                    ));
                }
            }
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let encoder = Encoder::<f32>::init(cfg.seed, cfg.encoder_config())?;
    let grid = cfg.feature_grid()?;
    let mut rows: Vec<(String, f64)> = Vec::new();

    match ck.meta.stage {
        1 => {
            let compressor =
                Compressor::from_params(cfg.compressor_config(), ck.group("compressor.")?);
            let decoder =
                FlowDecoder::from_params(cfg.flow_decoder_config()?, ck.group("decoder.")?);
            let flow_dims = cfg.flow_target_dims()?;

            let mut epe_sum = 0.0;
            let mut zero_sum = 0.0;
            let mut m_feats = Vec::new();
            let mut s_feats = Vec::new();
            let mut velocity = Vec::new();
            let mut appearance = Vec::new();
            for item in &data {
                let s = encoder.encode(&item.clip)?;
                let mut tape = Tape::<f32>::new();
                let cids = compressor.register(&mut tape, false);
                let dids = decoder.register(&mut tape, false);
                let sid = tape.constant(s.to_conv_layout());
                let m = compressor.forward(&mut tape, &cids, sid)?;
                let pred = decoder.forward(&mut tape, &dids, m)?;
                let pred_flow = to_flow_layout(tape.value(pred))?;
                let target = stage1_flow_target(&item.flow, cfg.patch[0], flow_dims[0])?;
                epe_sum += epe(&pred_flow, &target)?;
                let zeros = moalign_core::Tensor::zeros(target.shape());
                zero_sum += epe(&zeros, &target)?;

                let m_grid = FeatureGrid::from_conv_layout(tape.value(m))?;
                m_feats.push(
                    m_grid
                        .mean_pooled()
                        .data()
                        .iter()
                        .map(|v| *v as f64)
                        .collect(),
                );
                s_feats.push(s.mean_pooled().data().iter().map(|v| *v as f64).collect());
                velocity.push([item.label.velocity[0], item.label.velocity[1]]);
                appearance.push(item.label.color_id);
            }
            let n = data.len() as f64;
            rows.push(("epe".into(), epe_sum / n));
            rows.push(("epe_zero_baseline".into(), zero_sum / n));

            match super::probe::probe_disentanglement(
                &m_feats,
                &s_feats,
                &velocity,
                &appearance,
                crate::synthvid::PALETTE.len(),
                cfg.seed,
            ) {
                Ok(sc) => {
                    rows.push(("vel_r2_from_m".into(), sc.vel_r2_from_m));
                    rows.push(("vel_r2_from_s".into(), sc.vel_r2_from_s));
                    rows.push(("app_acc_from_m".into(), sc.app_acc_from_m));
                    rows.push(("app_acc_from_s".into(), sc.app_acc_from_s));
                }
                Err(e) => warnings.push(format!("probes skipped: {e}")),
            }
        }
        2 => {
            let denoiser = Denoiser::from_params(cfg.denoiser_config()?, ck.group("denoiser.")?)?;
            let projection =
                Projection::from_params(cfg.projection_config()?, ck.group("projection.")?)?;
            let vae = VaeStub::<f32>::init(
                cfg.seed,
                cfg.vae_temporal,
                cfg.vae_spatial,
                cfg.latent_channels,
            )?;
            let schedule = NoiseSchedule::linear(cfg.t_steps);
            let compressor = if ck.has_prefix("compressor.") {
                Some(Compressor::from_params(
                    cfg.compressor_config(),
                    ck.group("compressor.")?,
                ))
            } else {
                None
            };

            let mut diff_sum = 0.0;
            let mut sp_dist_sum = 0.0;
            let mut tm_dist_sum = 0.0;
            let mut rel_count = 0usize;
            for (i, item) in data.iter().enumerate() {
                let z0 = vae.encode(&item.clip)?;
                let t = rngs::derive(cfg.seed, EVAL_TAG, i as u64).gen_range(1..=cfg.t_steps);
                let mut noise_rng = rngs::derive(cfg.seed, EVAL_TAG, (i as u64) | (1 << 60));
                let (z_t, eps) = forward_noise(&z0, t, &schedule, &mut noise_rng)?;
                let mut tape = Tape::<f32>::new();
                let den_ids = denoiser.register(&mut tape, false);
                let z_id = tape.constant(z_t);
                let class = item.label.class_id.min(cfg.n_classes - 1);
                let (eps_hat, tap) = denoiser.forward(&mut tape, &den_ids, z_id, t, class)?;
                let eps_id = tape.constant(eps);
                let l = diffusion_loss_on(&mut tape, eps_hat, eps_id)?;
                diff_sum += tape.value(l).data()[0] as f64;

                if let Some(comp) = compressor.as_ref() {
                    let proj_ids = projection.register(&mut tape, false);
                    let z_tokens = projection.forward(&mut tape, &proj_ids, tap)?;
                    let s = encoder.encode(&item.clip)?;
                    let cids = comp.register(&mut tape, false);
                    let sid = tape.constant(s.to_conv_layout());
                    let m = comp.forward(&mut tape, &cids, sid)?;
                    let m_tokens = FeatureGrid::from_conv_layout(tape.value(m))?.token_matrix();
                    let z_tok = tape.value(z_tokens).clone();
                    let (sp, tm) = relational_distance(&z_tok, &m_tokens, grid, cfg.eps)?;
                    sp_dist_sum += sp;
                    tm_dist_sum += tm;
                    rel_count += 1;
                }
            }
            rows.push(("loss_diff".into(), diff_sum / data.len() as f64));
            if rel_count > 0 {
                rows.push(("rel_dist_spatial".into(), sp_dist_sum / rel_count as f64));
                rows.push(("rel_dist_temporal".into(), tm_dist_sum / rel_count as f64));
            } else {
                warnings.push(
                    "relational distance skipped: checkpoint carries no motion compressor".into(),
                );
            }
        }
        other => {
            return Err(PipelineError::Checkpoint {
                path: ckpt_dir.to_path_buf(),
                msg: format!("unknown stage {other}"),
            })
        }
    }

    let out = out_dir.join("eval.csv");
    write_eval_csv(&out, &warnings, &rows)?;
    Ok(out)
}

/// Mean absolute difference between similarity structures: per-frame
/// spatial matrices (averaged over frames) and the full temporal matrix.
pub fn relational_distance(
    z_tokens: &moalign_core::Tensor<f32>,
    m_tokens: &moalign_core::Tensor<f32>,
    grid: [usize; 3],
    eps: f64,
) -> Result<(f64, f64)> {
    let per_frame = grid[1] * grid[2];
    let d = z_tokens.shape()[1];
    let mut spatial = 0.0;
    for f in 0..grid[0] {
        let take = |t: &moalign_core::Tensor<f32>| {
            moalign_core::Tensor::new(
                vec![per_frame, d],
                t.data()[f * per_frame * d..(f + 1) * per_frame * d].to_vec(),
            )
            .expect("bounds")
        };
        let sz = spatial_similarity(&take(z_tokens), f, eps)?;
        let sm = spatial_similarity(&take(m_tokens), f, eps)?;
        let mean_abs: f64 = sz
            .matrix
            .data()
            .iter()
            .zip(sm.matrix.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / (per_frame * per_frame) as f64;
        spatial += mean_abs;
    }
    spatial /= grid[0] as f64;
    let tz = temporal_similarity(z_tokens, eps)?;
    let tm = temporal_similarity(m_tokens, eps)?;
    let n = tz.side();
    let temporal: f64 = tz
        .matrix
        .data()
        .iter()
        .zip(tm.matrix.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / (n * n) as f64;
    Ok((spatial, temporal))
}
