//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moalign::config::TrainConfig;
use moalign::error::Result;
use moalign::harness::{self, AblationSuite};
use moalign::synthvid::make_dataset;

#[derive(Parser)]
#[command(name = "moalign", version, about = "Motion-subspace learning and relational alignment of a toy latent video diffusion model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct CommonOverrides {
    /// INI config file; omitted keys fall back to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force the deterministic single-threaded mode.
    #[arg(long)]
    deterministic: bool,
    /// Step-count override.
    #[arg(long)]
    steps: Option<usize>,
    /// Dataset manifest override.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes dataset with ground-truth flow.
    GenData {
        #[command(flatten)]
        common: CommonOverrides,
        /// Number of clips.
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Stage 1: train the motion subspace on flow regression.
    TrainStage1 {
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Stage 2: fine-tune the toy diffusion model with alignment.
    TrainStage2 {
        #[command(flatten)]
        common: CommonOverrides,
        /// Stage-1 checkpoint directory (required for soft_trd / trd).
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        /// Loss mode override: soft_trd | trd | repa | none.
        #[arg(long)]
        loss_mode: Option<String>,
    },
    /// Evaluate a checkpoint on a held-out manifest.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Held-out dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for eval.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation sweep (loss_mode | tau | tap_layer).
    Ablate {
        #[command(flatten)]
        common: CommonOverrides,
        /// Which sweep to run.
        #[arg(long)]
        suite: String,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
    },
    /// Finite-difference checks for every registered operation.
    Gradcheck {
        /// Run the whole registry.
        #[arg(long)]
        all: bool,
        /// Run only operations whose name contains this substring.
        #[arg(long)]
        op: Option<String>,
    },
}

fn resolve(common: &CommonOverrides, stage: u8) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::desk(),
    };
    cfg.stage = stage;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(steps) = common.steps {
        cfg.steps = steps;
    }
    if let Some(manifest) = &common.manifest {
        cfg.manifest = Some(manifest.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { common, clips } => {
            let mut cfg = resolve(&common, 1)?;
            if let Some(c) = clips {
                cfg.clips = c;
            }
            let spec = cfg.dataset_spec();
            let manifest =
                make_dataset(&cfg.out, cfg.clips, &spec, cfg.seed, !cfg.deterministic)?;
            println!("wrote {} clips; manifest: {}", cfg.clips, manifest.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainStage1 { common } => {
            let cfg = resolve(&common, 1)?;
            let artifacts = harness::train_stage1(&cfg)?;
            println!("stage-1 checkpoint: {}", artifacts.ckpt_dir.display());
            println!("metrics: {}", artifacts.metrics_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainStage2 {
            common,
            stage1_ckpt,
            loss_mode,
        } => {
            let mut cfg = resolve(&common, 2)?;
            if let Some(mode) = &loss_mode {
                cfg.loss_mode = moalign::config::LossMode::parse(mode)?;
            }
            if cfg.loss_mode.needs_stage1() && stage1_ckpt.is_none() {
                eprintln!(
                    "error: loss mode {} requires --stage1-ckpt <DIR>",
                    cfg.loss_mode.name()
                );
                return Ok(ExitCode::from(1));
            }
            let artifacts = harness::train_stage2(&cfg, stage1_ckpt.as_deref())?;
            println!("stage-2 checkpoint: {}", artifacts.ckpt_dir.display());
            println!("metrics: {}", artifacts.metrics_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { ckpt, manifest, out } => {
            let path = harness::evaluate(&ckpt, &manifest, &out)?;
            println!("eval results: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ablate {
            common,
            suite,
            stage1_ckpt,
        } => {
            let cfg = resolve(&common, 2)?;
            let suite = AblationSuite::parse(&suite)?;
            let csv = harness::run_ablation(suite, &cfg, stage1_ckpt.as_deref(), &cfg.out)?;
            println!("comparison: {}", csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { all, op } => {
            let results = harness::gradsuite::full_suite();
            let filter = |name: &str| match (&op, all) {
                (Some(substr), _) => name.contains(substr.as_str()),
                (None, _) => true,
            };
            let mut failures = 0usize;
            let mut ran = 0usize;
            for r in results.iter().filter(|r| filter(&r.name)) {
                ran += 1;
                let verdict = if r.pass { "PASS" } else { "FAIL" };
                println!("{verdict} {} (max_rel_err {:.3e})", r.name, r.max_rel_err);
                if !r.pass {
                    failures += 1;
                }
            }
            if ran == 0 {
                eprintln!("error: no registered operation matches the filter");
                return Ok(ExitCode::from(1));
            }
            println!("{}/{ran} checks passed", ran - failures);
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success; usage errors
            // go to stderr with exit code 1
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
