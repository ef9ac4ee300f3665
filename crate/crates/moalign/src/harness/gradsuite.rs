//! The full gradient-check registry: every core tape operation, every loss,
//! and the composite stage-1 / stage-2 graphs at tiny dims, all verified
//! against 64-bit central differences.

use moalign_core::opcheck::{op_suite, OpCheck, SplitMix64};
use moalign_core::{finite_diff_check, Tape, Tensor, TensorId};

use crate::align::{
    precompute_align_targets, repa_loss_on, soft_trd_loss_on, total_loss_on, RepaProjectorIds,
    Tau, TemporalNorm,
};
use crate::diffusion::{
    diffusion_loss_on, Denoiser, DenoiserConfig, DenoiserIds, Projection, ProjectionConfig,
    ProjectionIds,
};
use crate::motion::{
    flow_loss_on, Compressor, CompressorConfig, CompressorIds, FlowDecoder, FlowDecoderConfig,
    FlowDecoderIds,
};

pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;
const EPS: f64 = 1e-8;

/// Run every registered check. Each returned entry carries the worst
/// relative error observed for that operation.
pub fn full_suite() -> Vec<OpCheck> {
    let mut out = op_suite(TOL, H);
    out.extend(loss_checks());
    out.extend(stage1_composite());
    out.extend(stage2_composite());
    out
}

fn push<F>(out: &mut Vec<OpCheck>, name: &str, x: Tensor<f64>, f: F)
where
    F: Fn(&mut Tape<f64>, TensorId) -> moalign_core::Result<TensorId>,
{
    let report = finite_diff_check(f, &x, H, TOL).unwrap_or_else(|e| {
        panic!("{name}: check construction failed: {e}");
    });
    out.push(OpCheck {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        pass: report.pass,
    });
}

fn loss_checks() -> Vec<OpCheck> {
    let mut out = Vec::new();
    let mut rng = SplitMix64::new(0xA11);

    // flow loss w.r.t. the prediction
    let target = rng.tensor(&[1, 2, 2, 4, 4]);
    let x = rng.tensor(&[1, 2, 2, 4, 4]);
    push(&mut out, "flow_loss", x, move |t, id| {
        let tc = t.constant(target.clone());
        flow_loss_on(t, id, tc).map_err(conv_err)
    });

    // diffusion loss w.r.t. the prediction
    let noise = rng.tensor(&[2, 2, 3, 3]);
    let x = rng.tensor(&[2, 2, 3, 3]);
    push(&mut out, "diffusion_loss", x, move |t, id| {
        let nc = t.constant(noise.clone());
        diffusion_loss_on(t, id, nc).map_err(conv_err)
    });

    // patchwise cosine alignment w.r.t. the (projected) student tokens
    let teacher = rng.tensor_off_kink(&[6, 4], 0.2);
    let x = rng.tensor_off_kink(&[6, 4], 0.2);
    push(&mut out, "repa_loss", x, move |t, id| {
        let tc = t.constant(teacher.clone());
        repa_loss_on(t, tc, id, EPS).map_err(conv_err)
    });

    // relational losses w.r.t. the aligned tokens (2 frames of 2x2 tokens)
    let grid = [2usize, 2, 2];
    let m = rng.tensor_off_kink(&[8, 3], 0.15);
    let soft_targets = precompute_align_targets(&m, grid, Tau::Finite(10.0), EPS).unwrap();
    let x = rng.tensor_off_kink(&[8, 3], 0.15);
    push(&mut out, "soft_trd_loss", x, move |t, id| {
        soft_trd_loss_on(t, id, &soft_targets, TemporalNorm::AllEntries, 4, EPS).map_err(conv_err)
    });

    let hard_targets = precompute_align_targets(&m, grid, Tau::Infinite, EPS).unwrap();
    let x = rng.tensor_off_kink(&[8, 3], 0.15);
    push(&mut out, "trd_loss", x, move |t, id| {
        soft_trd_loss_on(t, id, &hard_targets, TemporalNorm::AllEntries, 8, EPS).map_err(conv_err)
    });

    out
}

fn conv_err(e: crate::error::PipelineError) -> moalign_core::TensorError {
    moalign_core::TensorError::Invalid {
        op: "loss",
        msg: e.to_string(),
    }
}

/// Check a multi-parameter graph: for each parameter tensor in turn, treat
/// that tensor as the differentiation target and every other as constant.
fn composite<F>(
    out: &mut Vec<OpCheck>,
    label: &str,
    params: &[(String, Tensor<f64>)],
    build: F,
) where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> crate::error::Result<TensorId>,
{
    for (pi, (pname, pt)) in params.iter().enumerate() {
        let report = finite_diff_check(
            |tape, xid| {
                let ids: Vec<TensorId> = params
                    .iter()
                    .enumerate()
                    .map(|(j, (_, t))| {
                        if j == pi {
                            xid
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect();
                build(tape, &ids).map_err(conv_err)
            },
            pt,
            H,
            TOL,
        )
        .unwrap_or_else(|e| panic!("{label}/{pname}: {e}"));
        out.push(OpCheck {
            name: format!("{label}/{pname}"),
            max_rel_err: report.max_rel_err,
            pass: report.pass,
        });
    }
}

/// Stage-1 graph at tiny dims: flow loss through decoder and compressor.
fn stage1_composite() -> Vec<OpCheck> {
    let mut out = Vec::new();
    let comp = Compressor::<f64>::init(
        21,
        CompressorConfig {
            d_v: 6,
            hidden: 3,
            d_m: 2,
        },
    )
    .expect("valid config");
    let dec = FlowDecoder::<f64>::init(
        22,
        FlowDecoderConfig {
            d_m: 2,
            c_mid: 3,
            c_up1: 3,
            c_up2: 2,
            target: [1, 8, 8],
            output_scale: 8.0,
        },
    )
    .expect("valid config");

    let mut rng = SplitMix64::new(0xB22);
    let features = rng.tensor(&[1, 6, 2, 2, 2]);
    let target = rng.tensor(&[1, 2, 1, 8, 8]);

    let mut params: Vec<(String, Tensor<f64>)> = Vec::new();
    for (n, t) in comp.params.iter() {
        params.push((n.clone(), t.clone()));
    }
    let n_comp = params.len();
    for (n, t) in dec.params.iter() {
        params.push((n.clone(), t.clone()));
    }

    let comp_cfg = comp.cfg.clone();
    let dec_cfg = dec.cfg.clone();
    composite(&mut out, "stage1", &params, move |tape, ids| {
        let comp = Compressor::<f64> {
            cfg: comp_cfg.clone(),
            params: Default::default(),
        };
        let dec = FlowDecoder::<f64> {
            cfg: dec_cfg.clone(),
            params: Default::default(),
        };
        let cids = CompressorIds::from_raw(ids[..n_comp].to_vec());
        let dids = FlowDecoderIds::from_raw(ids[n_comp..].to_vec());
        let s = tape.constant(features.clone());
        let m = comp.forward(tape, &cids, s)?;
        let pred = dec.forward(tape, &dids, m)?;
        let tc = tape.constant(target.clone());
        flow_loss_on(tape, pred, tc)
    });
    out
}

/// Stage-2 graph at tiny dims: diffusion loss plus the soft relational
/// alignment through the projection head.
fn stage2_composite() -> Vec<OpCheck> {
    let mut out = Vec::new();
    let den_cfg = DenoiserConfig {
        d_model: 6,
        layers: 2,
        tap_layer: 2,
        ff_mult: 2,
        patch: [1, 2, 2],
        latent_channels: 2,
        latent_grid: [2, 4, 4],
        n_classes: 2,
        t_steps: 4,
    };
    let proj_cfg = ProjectionConfig {
        d_in: 6,
        hidden: 2,
        d_m: 3,
        in_grid: [2, 2, 2],
        target_grid: [2, 2, 2],
        temporal_scale: 2,
        spatial_stride: 1,
    };
    let den = Denoiser::<f64>::init(31, den_cfg.clone()).unwrap();
    let proj = Projection::<f64>::init(32, proj_cfg.clone()).unwrap();
    let den_cfg_soft = den_cfg.clone();

    let mut rng = SplitMix64::new(0xC33);
    let z_t = rng.tensor(&[2, 2, 4, 4]);
    let noise = rng.tensor(&[2, 2, 4, 4]);
    let m_tokens = rng.tensor_off_kink(&[8, 3], 0.15);
    let targets = precompute_align_targets(&m_tokens, [2, 2, 2], Tau::Finite(10.0), EPS).unwrap();

    let mut params: Vec<(String, Tensor<f64>)> = Vec::new();
    for (n, t) in den.params.iter() {
        params.push((n.clone(), t.clone()));
    }
    let n_den = params.len();
    for (n, t) in proj.params.iter() {
        params.push((n.clone(), t.clone()));
    }

    composite(&mut out, "stage2", &params, move |tape, ids| {
        let den = Denoiser::<f64>::from_params(den_cfg_soft.clone(), Default::default())?;
        let proj = Projection::<f64>::from_params(proj_cfg.clone(), Default::default())?;
        let did = DenoiserIds::from_raw(ids[..n_den].to_vec());
        let pid = ProjectionIds::from_raw(ids[n_den..].to_vec());
        let z = tape.constant(z_t.clone());
        let (eps_hat, tap) = den.forward(tape, &did, z, 2, 1)?;
        let nc = tape.constant(noise.clone());
        let l_diff = diffusion_loss_on(tape, eps_hat, nc)?;
        let z_tokens = proj.forward(tape, &pid, tap)?;
        let l_align =
            soft_trd_loss_on(tape, z_tokens, &targets, TemporalNorm::AllEntries, 4, EPS)?;
        total_loss_on(tape, l_diff, l_align, 0.5)
    });

    // the feature-matching projector, through the same tap
    let den2 = Denoiser::<f64>::init(33, den_cfg.clone()).unwrap();
    let teacher = rng.tensor_off_kink(&[8, 5], 0.2);
    let mut phi_params: Vec<(String, Tensor<f64>)> = Vec::new();
    {
        let proj = crate::align::RepaProjector::<f64>::init(34, 6, 5);
        for (n, t) in proj.params.iter() {
            phi_params.push((n.clone(), t.clone()));
        }
    }
    let den_params: Vec<Tensor<f64>> =
        den2.params.iter().map(|(_, t)| t.clone()).collect();
    let den_cfg2 = den_cfg.clone();
    let z_t2 = rng.tensor(&[2, 2, 4, 4]);
    composite(&mut out, "stage2_repa", &phi_params, move |tape, ids| {
        let den = Denoiser::<f64>::from_params(den_cfg2.clone(), Default::default())?;
        let did = DenoiserIds::from_raw(
            den_params.iter().map(|t| tape.constant(t.clone())).collect(),
        );
        let z = tape.constant(z_t2.clone());
        let (_, tap) = den.forward(tape, &did, z, 1, 0)?;
        let proj = crate::align::RepaProjector::<f64>::from_params(6, 5, Default::default());
        let pid = RepaProjectorIds::from_raw(ids.to_vec());
        let student = proj.apply(tape, &pid, tap)?;
        let tc = tape.constant(teacher.clone());
        repa_loss_on(tape, tc, student, EPS)
    });

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_gradients_pass() {
        for r in loss_checks() {
            assert!(r.pass, "{}: max_rel_err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn stage1_composite_gradients_pass() {
        for r in stage1_composite() {
            assert!(r.pass, "{}: max_rel_err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn stage2_composite_gradients_pass() {
        for r in stage2_composite() {
            assert!(r.pass, "{}: max_rel_err {}", r.name, r.max_rel_err);
        }
    }
}
