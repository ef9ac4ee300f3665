//! Run configuration: an INI-style file with `[model]`, `[train]`, `[loss]`
//! and `[data]` sections, `key = value` pairs, `#`/`;` comments, and hard
//! errors on unknown keys. Every run echoes the fully resolved config next
//! to its metrics so runs are reproducible from their artifacts alone.

use std::path::{Path, PathBuf};

use crate::align::{Tau, TemporalNorm};
use crate::diffusion::{DenoiserConfig, ProjectionConfig};
use crate::encoder::EncoderConfig;
use crate::error::{PipelineError, Result};
use crate::motion::{CompressorConfig, FlowDecoderConfig};
use crate::synthvid::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    SoftTrd,
    Trd,
    Repa,
    None,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft_trd" => Ok(LossMode::SoftTrd),
            "trd" => Ok(LossMode::Trd),
            "repa" => Ok(LossMode::Repa),
            "none" => Ok(LossMode::None),
            other => Err(PipelineError::Config(format!(
                "unknown loss mode '{other}' (expected soft_trd | trd | repa | none)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::SoftTrd => "soft_trd",
            LossMode::Trd => "trd",
            LossMode::Repa => "repa",
            LossMode::None => "none",
        }
    }

    /// Modes that align against the motion subspace need stage-1 weights.
    pub fn needs_stage1(self) -> bool {
        matches!(self, LossMode::SoftTrd | LossMode::Trd)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub preset: Preset,

    // [model]
    pub d_v: usize,
    pub patch: [usize; 3],
    pub d_m: usize,
    pub compressor_hidden: usize,
    pub decoder_c_mid: usize,
    pub decoder_c_up1: usize,
    pub decoder_c_up2: usize,
    pub flow_scale: f64,
    pub flow_target_hw: [usize; 2],
    pub d_model: usize,
    pub layers: usize,
    pub tap_layer: usize,
    pub ff_mult: usize,
    pub denoiser_patch: [usize; 3],
    pub latent_channels: usize,
    pub vae_temporal: usize,
    pub vae_spatial: usize,
    pub n_classes: usize,
    pub t_steps: usize,
    pub proj_hidden: usize,
    pub proj_spatial_stride: usize,
    pub proj_temporal_scale: usize,

    // [data]
    pub manifest: Option<PathBuf>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub clips: usize,
    pub objects_per_clip: usize,
    pub speed_max: f64,
    pub omega_max: f64,

    // [train]
    pub stage: u8,
    pub steps: usize,
    pub batch: usize,
    lr_explicit: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,

    // [loss]
    pub loss_mode: LossMode,
    pub lambda: f64,
    pub tau: Tau,
    pub temporal_norm: TemporalNorm,
    pub block_rows: usize,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: every tensor small enough that the full
    /// pipeline trains in minutes on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            preset: Preset::Desk,
            d_v: 96,
            patch: [3, 8, 8],
            d_m: 16,
            compressor_hidden: 32,
            decoder_c_mid: 32,
            decoder_c_up1: 32,
            decoder_c_up2: 16,
            flow_scale: 8.0,
            flow_target_hw: [32, 48],
            d_model: 128,
            layers: 8,
            tap_layer: 6,
            ff_mult: 2,
            denoiser_patch: [1, 4, 4],
            latent_channels: 8,
            vae_temporal: 4,
            vae_spatial: 2,
            n_classes: 8,
            t_steps: 50,
            proj_hidden: ProjectionConfig::hidden_for(128),
            proj_spatial_stride: 1,
            proj_temporal_scale: 2,
            manifest: None,
            frames: 9,
            height: 32,
            width: 48,
            clips: 64,
            objects_per_clip: 1,
            speed_max: 2.0,
            omega_max: 0.1,
            stage: 1,
            steps: 2000,
            batch: 8,
            lr_explicit: None,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-3,
            seed: 0,
            deterministic: true,
            out: PathBuf::from("runs/out"),
            loss_mode: LossMode::SoftTrd,
            lambda: 0.5,
            tau: Tau::Finite(10.0),
            temporal_norm: TemporalNorm::AllEntries,
            block_rows: 64,
            eps: 1e-8,
        }
    }

    /// Full-scale shape preset (construction and shape checks only; not
    /// sized for CPU training). Widths follow the reported architecture:
    /// 768-channel encoder features compressed 768 -> 256 -> 64, a
    /// 1920-wide denoiser tapped at block 18, projection hidden width 256,
    /// and a fixed 23 x 128 x 192 flow target.
    pub fn paper() -> Self {
        TrainConfig {
            preset: Preset::Paper,
            d_v: 768,
            patch: [2, 16, 16],
            d_m: 64,
            compressor_hidden: 256,
            decoder_c_mid: 64,
            decoder_c_up1: 32,
            decoder_c_up2: 16,
            flow_scale: 8.0,
            flow_target_hw: [128, 192],
            d_model: 1920,
            layers: 30,
            tap_layer: 18,
            ff_mult: 4,
            denoiser_patch: [1, 2, 2],
            latent_channels: 16,
            vae_temporal: 4,
            vae_spatial: 8,
            n_classes: 8,
            t_steps: 50,
            proj_hidden: ProjectionConfig::hidden_for(1920),
            proj_spatial_stride: 1,
            proj_temporal_scale: 2,
            frames: 48,
            height: 160,
            width: 240,
            clips: 64,
            steps: 4000,
            batch: 32,
            ..Self::desk()
        }
    }

    /// Learning rate: explicit value if set, otherwise the per-stage
    /// default (1e-4 for stage 1, 2e-6 for stage 2).
    pub fn lr(&self) -> f64 {
        self.lr_explicit
            .unwrap_or(if self.stage == 1 { 1e-4 } else { 2e-6 })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr_explicit = Some(lr);
    }

    // ── derived geometry ───────────────────────────────────────────

    pub fn feature_grid(&self) -> Result<[usize; 3]> {
        let [pt, ph, pw] = self.patch;
        if self.frames % pt != 0 || self.height % ph != 0 || self.width % pw != 0 {
            return Err(PipelineError::Config(format!(
                "clip {}x{}x{} not divisible by encoder patch {:?}",
                self.frames, self.height, self.width, self.patch
            )));
        }
        Ok([self.frames / pt, self.height / ph, self.width / pw])
    }

    pub fn flow_target_dims(&self) -> Result<[usize; 3]> {
        let g = self.feature_grid()?;
        if g[0] < 2 {
            return Err(PipelineError::Config(
                "need at least 2 feature frames for flow supervision".into(),
            ));
        }
        Ok([g[0] - 1, self.flow_target_hw[0], self.flow_target_hw[1]])
    }

    pub fn latent_grid(&self) -> Result<[usize; 3]> {
        if self.height % self.vae_spatial != 0 || self.width % self.vae_spatial != 0 {
            return Err(PipelineError::Config(format!(
                "clip {}x{} not divisible by vae spatial factor {}",
                self.height, self.width, self.vae_spatial
            )));
        }
        Ok([
            self.frames.div_ceil(self.vae_temporal),
            self.height / self.vae_spatial,
            self.width / self.vae_spatial,
        ])
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch: self.patch,
            d_v: self.d_v,
        }
    }

    pub fn compressor_config(&self) -> CompressorConfig {
        CompressorConfig {
            d_v: self.d_v,
            hidden: self.compressor_hidden,
            d_m: self.d_m,
        }
    }

    pub fn flow_decoder_config(&self) -> Result<FlowDecoderConfig> {
        Ok(FlowDecoderConfig {
            d_m: self.d_m,
            c_mid: self.decoder_c_mid,
            c_up1: self.decoder_c_up1,
            c_up2: self.decoder_c_up2,
            target: self.flow_target_dims()?,
            output_scale: self.flow_scale,
        })
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        Ok(DenoiserConfig {
            d_model: self.d_model,
            layers: self.layers,
            tap_layer: self.tap_layer,
            ff_mult: self.ff_mult,
            patch: self.denoiser_patch,
            latent_channels: self.latent_channels,
            latent_grid: self.latent_grid()?,
            n_classes: self.n_classes,
            t_steps: self.t_steps,
        })
    }

    pub fn projection_config(&self) -> Result<ProjectionConfig> {
        let den = self.denoiser_config()?;
        Ok(ProjectionConfig {
            d_in: self.d_model,
            hidden: self.proj_hidden,
            d_m: self.d_m,
            in_grid: den.token_grid()?,
            target_grid: self.feature_grid()?,
            temporal_scale: self.proj_temporal_scale,
            spatial_stride: self.proj_spatial_stride,
        })
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            width: self.width,
            height: self.height,
            frames: self.frames,
            families: crate::synthvid::SceneFamily::default_families(),
            speed_max: self.speed_max,
            omega_max: self.omega_max,
            objects_per_clip: self.objects_per_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_grid()?;
        if self.stage != 1 && self.stage != 2 {
            return Err(PipelineError::Config(format!(
                "stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        if self.batch == 0 {
            return Err(PipelineError::Config("batch must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(PipelineError::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        self.tau.validate()?;
        if self.stage == 2 {
            self.denoiser_config()?.validate()?;
            self.projection_config()?.validate()?;
        } else {
            self.flow_decoder_config()?;
        }
        Ok(())
    }

    // ── INI parsing / echo ─────────────────────────────────────────

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_ini(&text)
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        // the preset key decides the baseline, so scan for it first
        let mut base = TrainConfig::desk();
        for (section, key, value) in ini_pairs(text)? {
            if section == "model" && key == "preset" {
                base = match value.as_str() {
                    "desk" => TrainConfig::desk(),
                    "paper" => TrainConfig::paper(),
                    other => {
                        return Err(PipelineError::Config(format!(
                            "unknown preset '{other}' (expected desk | paper)"
                        )))
                    }
                };
            }
        }
        for (section, key, value) in ini_pairs(text)? {
            base.apply(&section, &key, &value)?;
        }
        Ok(base)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown =
            || PipelineError::Config(format!("unknown key '{key}' in section [{section}]"));
        let bad = |what: &str| {
            PipelineError::Config(format!(
                "[{section}] {key}: cannot parse '{value}' as {what}"
            ))
        };
        macro_rules! int {
            () => {
                value.parse::<usize>().map_err(|_| bad("integer"))?
            };
        }
        macro_rules! float {
            () => {
                value.parse::<f64>().map_err(|_| bad("number"))?
            };
        }
        match section {
            "model" => match key {
                "preset" => {} // handled in the first pass
                "d_v" => self.d_v = int!(),
                "patch_t" => self.patch[0] = int!(),
                "patch_h" => self.patch[1] = int!(),
                "patch_w" => self.patch[2] = int!(),
                "d_m" => self.d_m = int!(),
                "compressor_hidden" => self.compressor_hidden = int!(),
                "decoder_c_mid" => self.decoder_c_mid = int!(),
                "decoder_c_up1" => self.decoder_c_up1 = int!(),
                "decoder_c_up2" => self.decoder_c_up2 = int!(),
                "flow_scale" => self.flow_scale = float!(),
                "flow_target_h" => self.flow_target_hw[0] = int!(),
                "flow_target_w" => self.flow_target_hw[1] = int!(),
                "d_model" => self.d_model = int!(),
                "layers" => self.layers = int!(),
                "tap_layer" => self.tap_layer = int!(),
                "ff_mult" => self.ff_mult = int!(),
                "denoiser_patch_t" => self.denoiser_patch[0] = int!(),
                "denoiser_patch_h" => self.denoiser_patch[1] = int!(),
                "denoiser_patch_w" => self.denoiser_patch[2] = int!(),
                "latent_channels" => self.latent_channels = int!(),
                "vae_temporal" => self.vae_temporal = int!(),
                "vae_spatial" => self.vae_spatial = int!(),
                "n_classes" => self.n_classes = int!(),
                "t_steps" => self.t_steps = int!(),
                "proj_hidden" => self.proj_hidden = int!(),
                "proj_spatial_stride" => self.proj_spatial_stride = int!(),
                "proj_temporal_scale" => self.proj_temporal_scale = int!(),
                _ => return Err(unknown()),
            },
            "data" => match key {
                "manifest" => self.manifest = Some(PathBuf::from(value)),
                "frames" => self.frames = int!(),
                "height" => self.height = int!(),
                "width" => self.width = int!(),
                "clips" => self.clips = int!(),
                "objects_per_clip" => self.objects_per_clip = int!(),
                "speed_max" => self.speed_max = float!(),
                "omega_max" => self.omega_max = float!(),
                _ => return Err(unknown()),
            },
            "train" => match key {
                "stage" => self.stage = value.parse::<u8>().map_err(|_| bad("stage (1 or 2)"))?,
                "steps" => self.steps = int!(),
                "batch" => self.batch = int!(),
                "lr" => self.lr_explicit = Some(float!()),
                "beta1" => self.beta1 = float!(),
                "beta2" => self.beta2 = float!(),
                "weight_decay" => self.weight_decay = float!(),
                "seed" => self.seed = value.parse::<u64>().map_err(|_| bad("u64"))?,
                "deterministic" => {
                    self.deterministic = value.parse::<bool>().map_err(|_| bad("bool"))?
                }
                "out" => self.out = PathBuf::from(value),
                _ => return Err(unknown()),
            },
            "loss" => match key {
                "mode" => self.loss_mode = LossMode::parse(value)?,
                "lambda" => self.lambda = float!(),
                "tau" => {
                    self.tau = if value == "inf" {
                        Tau::Infinite
                    } else {
                        Tau::Finite(float!())
                    }
                }
                "temporal_norm" => {
                    self.temporal_norm = match value {
                        "all" => TemporalNorm::AllEntries,
                        "masked" => TemporalNorm::MaskedMean,
                        _ => return Err(bad("temporal_norm (all | masked)")),
                    }
                }
                "block_rows" => self.block_rows = int!(),
                "eps" => self.eps = float!(),
                _ => return Err(unknown()),
            },
            other => {
                return Err(PipelineError::Config(format!("unknown section [{other}]")));
            }
        }
        Ok(())
    }

    /// Serialize the fully resolved configuration (defaults expanded).
    pub fn to_ini(&self) -> String {
        let preset = match self.preset {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        };
        let tau = match self.tau {
            Tau::Finite(t) => format!("{t}"),
            Tau::Infinite => "inf".into(),
        };
        let norm = match self.temporal_norm {
            TemporalNorm::AllEntries => "all",
            TemporalNorm::MaskedMean => "masked",
        };
        let manifest = self
            .manifest
            .as_ref()
            .map(|p| format!("manifest = {}\n", p.display()))
            .unwrap_or_default();
        format!(
            "[model]\npreset = {preset}\nd_v = {}\npatch_t = {}\npatch_h = {}\npatch_w = {}\n\
             d_m = {}\ncompressor_hidden = {}\ndecoder_c_mid = {}\ndecoder_c_up1 = {}\n\
             decoder_c_up2 = {}\nflow_scale = {}\nflow_target_h = {}\nflow_target_w = {}\nd_model = {}\n\
             layers = {}\ntap_layer = {}\nff_mult = {}\ndenoiser_patch_t = {}\n\
             denoiser_patch_h = {}\ndenoiser_patch_w = {}\nlatent_channels = {}\n\
             vae_temporal = {}\nvae_spatial = {}\nn_classes = {}\nt_steps = {}\n\
             proj_hidden = {}\nproj_spatial_stride = {}\nproj_temporal_scale = {}\n\n\
             [data]\n{manifest}frames = {}\nheight = {}\nwidth = {}\nclips = {}\n\
             objects_per_clip = {}\nspeed_max = {}\nomega_max = {}\n\n\
             [train]\nstage = {}\nsteps = {}\nbatch = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\n\
             weight_decay = {}\nseed = {}\ndeterministic = {}\nout = {}\n\n\
             [loss]\nmode = {}\nlambda = {}\ntau = {tau}\ntemporal_norm = {norm}\n\
             block_rows = {}\neps = {}\n",
            self.d_v,
            self.patch[0],
            self.patch[1],
            self.patch[2],
            self.d_m,
            self.compressor_hidden,
            self.decoder_c_mid,
            self.decoder_c_up1,
            self.decoder_c_up2,
            self.flow_scale,
            self.flow_target_hw[0],
            self.flow_target_hw[1],
            self.d_model,
            self.layers,
            self.tap_layer,
            self.ff_mult,
            self.denoiser_patch[0],
            self.denoiser_patch[1],
            self.denoiser_patch[2],
            self.latent_channels,
            self.vae_temporal,
            self.vae_spatial,
            self.n_classes,
            self.t_steps,
            self.proj_hidden,
            self.proj_spatial_stride,
            self.proj_temporal_scale,
            self.frames,
            self.height,
            self.width,
            self.clips,
            self.objects_per_clip,
            self.speed_max,
            self.omega_max,
            self.stage,
            self.steps,
            self.batch,
            self.lr(),
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.seed,
            self.deterministic,
            self.out.display(),
            self.loss_mode.name(),
            self.lambda,
            self.block_rows,
            self.eps,
        )
    }
}

fn ini_pairs(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                PipelineError::Config(format!("line {}: malformed section header", ln + 1))
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            PipelineError::Config(format!("line {}: expected 'key = value'", ln + 1))
        })?;
        if section.is_empty() {
            return Err(PipelineError::Config(format!(
                "line {}: key outside any section",
                ln + 1
            )));
        }
        out.push((
            section.clone(),
            key.trim().to_string(),
            value.trim().to_string(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_geometry_is_consistent() {
        let cfg = TrainConfig::desk();
        assert_eq!(cfg.feature_grid().unwrap(), [3, 4, 6]);
        assert_eq!(cfg.flow_target_dims().unwrap(), [2, 32, 48]);
        assert_eq!(cfg.latent_grid().unwrap(), [3, 16, 24]);
        cfg.validate().unwrap();
        let mut s2 = cfg;
        s2.stage = 2;
        s2.validate().unwrap();
        assert_eq!(s2.lr(), 2e-6);
    }

    #[test]
    fn paper_preset_constructs() {
        let cfg = TrainConfig::paper();
        assert_eq!(cfg.feature_grid().unwrap(), [24, 10, 15]);
        assert_eq!(cfg.flow_target_dims().unwrap(), [23, 128, 192]);
        assert_eq!(cfg.proj_hidden, 256);
        cfg.validate().unwrap();
        let mut s2 = cfg;
        s2.stage = 2;
        s2.validate().unwrap();
    }

    #[test]
    fn ini_roundtrip_and_overrides() {
        let text = "\n[model]\nd_m = 8\n\n[train]\nstage = 2\nlr = 0.001\nseed = 9\n\n[loss]\nmode = trd\ntau = inf\n";
        let cfg = TrainConfig::from_ini(text).unwrap();
        assert_eq!(cfg.d_m, 8);
        assert_eq!(cfg.stage, 2);
        assert_eq!(cfg.lr(), 0.001);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loss_mode, LossMode::Trd);
        assert_eq!(cfg.tau, Tau::Infinite);
        // echo parses back to the same values
        let echoed = TrainConfig::from_ini(&cfg.to_ini()).unwrap();
        assert_eq!(echoed.d_m, 8);
        assert_eq!(echoed.lr(), 0.001);
        assert_eq!(echoed.tau, Tau::Infinite);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(TrainConfig::from_ini("[model]\nwat = 3\n").is_err());
        assert!(TrainConfig::from_ini("[nope]\nd_m = 3\n").is_err());
        assert!(TrainConfig::from_ini("d_m = 3\n").is_err());
    }

    #[test]
    fn per_stage_lr_defaults() {
        let cfg = TrainConfig::from_ini("[train]\nstage = 1\n").unwrap();
        assert_eq!(cfg.lr(), 1e-4);
        let cfg = TrainConfig::from_ini("[train]\nstage = 2\n").unwrap();
        assert_eq!(cfg.lr(), 2e-6);
    }
}
