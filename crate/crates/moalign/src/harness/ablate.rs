//! Ablation sweeps over the stage-2 loss configuration: loss mode,
//! temperature, and tap layer. Every variant shares the base seed and data
//! order; each trains into its own subdirectory and contributes one row to
//! a comparison CSV.

use std::path::{Path, PathBuf};

use super::train2::train_stage2;
use crate::align::Tau;
use crate::config::{LossMode, TrainConfig};
use crate::error::{PipelineError, Result};
use crate::metrics::{read_metrics, METRICS_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    LossMode,
    Tau,
    TapLayer,
}

impl AblationSuite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss_mode" => Ok(AblationSuite::LossMode),
            "tau" => Ok(AblationSuite::Tau),
            "tap_layer" => Ok(AblationSuite::TapLayer),
            other => Err(PipelineError::Config(format!(
                "unknown ablation suite '{other}' (expected loss_mode | tau | tap_layer)"
            ))),
        }
    }
}

struct Variant {
    name: String,
    cfg: TrainConfig,
}

fn variants(suite: AblationSuite, base: &TrainConfig) -> Vec<Variant> {
    match suite {
        AblationSuite::LossMode => [LossMode::Repa, LossMode::Trd, LossMode::SoftTrd, LossMode::None]
            .into_iter()
            .map(|mode| {
                let mut cfg = base.clone();
                cfg.loss_mode = mode;
                Variant {
                    name: format!("loss_{}", mode.name()),
                    cfg,
                }
            })
            .collect(),
        AblationSuite::Tau => [
            ("tau_1", Tau::Finite(1.0)),
            ("tau_10", Tau::Finite(10.0)),
            ("tau_100", Tau::Finite(100.0)),
            ("tau_inf", Tau::Infinite),
        ]
        .into_iter()
        .map(|(name, tau)| {
            let mut cfg = base.clone();
            cfg.loss_mode = LossMode::SoftTrd;
            cfg.tau = tau;
            Variant {
                name: name.to_string(),
                cfg,
            }
        })
        .collect(),
        AblationSuite::TapLayer => {
            let l = base.layers;
            [l / 4, l / 2, 3 * l / 4, l]
                .into_iter()
                .map(|tap| {
                    let mut cfg = base.clone();
                    cfg.tap_layer = tap.max(1);
                    Variant {
                        name: format!("tap_{}", tap.max(1)),
                        cfg,
                    }
                })
                .collect()
        }
    }
}

/// Run a sweep; returns the comparison CSV path. Per-variant metrics land
/// under `<out>/variants/<name>/metrics.csv`.
pub fn run_ablation(
    suite: AblationSuite,
    base: &TrainConfig,
    stage1_ckpt: Option<&Path>,
    out_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let mut rows = Vec::new();
    for variant in variants(suite, base) {
        let mut cfg = variant.cfg;
        cfg.stage = 2;
        cfg.out = out_dir.join("variants").join(&variant.name);
        if cfg.loss_mode.needs_stage1() && stage1_ckpt.is_none() {
            return Err(PipelineError::Config(format!(
                "ablation variant {} requires a stage-1 checkpoint",
                variant.name
            )));
        }
        let artifacts = train_stage2(&cfg, stage1_ckpt)?;
        let metrics = read_metrics(&artifacts.metrics_path)?;
        let last = metrics.last().ok_or_else(|| {
            PipelineError::Config(format!("variant {} produced no metrics", variant.name))
        })?;
        let tau = match cfg.tau {
            Tau::Finite(t) => format!("{t}"),
            Tau::Infinite => "inf".into(),
        };
        rows.push(format!(
            "{},{},{},{},{},{:.9e},{:.9e},{:.9e}",
            variant.name,
            cfg.loss_mode.name(),
            tau,
            cfg.tap_layer,
            cfg.steps,
            last.loss_diff,
            last.loss_align,
            last.loss_total,
        ));
    }
    let csv = out_dir.join("comparison.csv");
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    text.push_str("variant,loss_mode,tau,tap_layer,steps,final_loss_diff,final_loss_align,final_loss_total\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(&csv, text).map_err(|e| PipelineError::io(&csv, e))?;
    Ok(csv)
}
