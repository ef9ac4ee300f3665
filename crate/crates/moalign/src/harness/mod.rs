//! Training loops, evaluation, ablations and the gradient-check registry.

pub mod ablate;
pub mod ckpt;
pub mod evaluate;
pub mod gradsuite;
pub mod probe;
pub mod train1;
pub mod train2;

use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

use moalign_core::Tensor;

use crate::error::{PipelineError, Result};
use crate::io::read_tensor_as;
use crate::optim::ParamGroup;
use crate::rngs::{self, tags};
use crate::synthvid::{read_manifest, ClipLabel, FlowField, VideoClip};

pub use ablate::{run_ablation, AblationSuite};
pub use evaluate::evaluate;
pub use probe::{probe_disentanglement, random_projection, DisentanglementScores};
pub use train1::train_stage1;
pub use train2::train_stage2;

/// Paths produced by a training run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub ckpt_dir: PathBuf,
    pub resolved_config: PathBuf,
    pub freeze_path: PathBuf,
}

#[derive(Debug)]
pub struct LoadedClip {
    pub clip: VideoClip<f32>,
    pub flow: FlowField<f32>,
    pub label: ClipLabel,
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<LoadedClip>> {
    let entries = read_manifest(manifest)?;
    entries
        .into_iter()
        .map(|e| {
            Ok(LoadedClip {
                clip: VideoClip::new(read_tensor_as::<f32>(&e.clip_path)?)?,
                flow: FlowField::new(read_tensor_as::<f32>(&e.flow_path)?)?,
                label: e.label,
            })
        })
        .collect()
}

/// SHA-256 of a tensor's shape header plus little-endian payload.
pub fn tensor_hash(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn group_hashes(groups: &[(&str, &ParamGroup<f32>)]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (prefix, group) in groups {
        let mut h = Sha256::new();
        for (name, t) in group.iter() {
            h.update(name.as_bytes());
            h.update(tensor_hash(t).as_bytes());
        }
        out.push((prefix.to_string(), hex(&h.finalize())));
    }
    out
}

/// Write the freeze ledger: hashes of frozen parameter sets before and
/// after a run, with a match flag per set.
pub fn write_freeze_file(
    path: &Path,
    before: &[(String, String)],
    after: &[(String, String)],
) -> Result<()> {
    let mut text = String::from("# frozen parameter hashes (sha256)\n");
    for ((name, pre), (_, post)) in before.iter().zip(after) {
        let ok = if pre == post { "unchanged" } else { "CHANGED" };
        text.push_str(&format!("{name}\t{pre}\t{post}\t{ok}\n"));
    }
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn frozen_sets_unchanged(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .all(|l| l.ends_with("unchanged")))
}

/// Deterministic epoch-shuffled batch index stream.
pub struct BatchSampler {
    seed: u64,
    n: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut s = BatchSampler {
            seed,
            n,
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = rngs::derive(self.seed, tags::BATCH_ORDER, self.epoch);
        self.order = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos == self.n {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
