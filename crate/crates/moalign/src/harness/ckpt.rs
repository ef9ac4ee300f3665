//! Checkpoints: a directory of MOTN tensors plus a JSON manifest carrying
//! the step counter, the resolved config, and bookkeeping extras.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use moalign_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::io::{read_tensor_as, write_tensor};
use crate::optim::ParamGroup;

pub const CKPT_FORMAT: &str = "moalign-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub stage: u8,
    pub step: usize,
    pub config_ini: String,
    /// Tensor names in group order mapped to their files.
    pub tensors: Vec<(String, String)>,
    pub extra: serde_json::Value,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, Tensor<f32>>,
    order: Vec<String>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    /// Rebuild a parameter group from every tensor whose name starts with
    /// `prefix`, preserving checkpoint order.
    pub fn group(&self, prefix: &str) -> Result<ParamGroup<f32>> {
        let mut g = ParamGroup::new();
        for name in &self.order {
            if name.starts_with(prefix) {
                g.push(name.clone(), self.tensors[name].clone());
            }
        }
        if g.is_empty() {
            return Err(PipelineError::Checkpoint {
                path: PathBuf::new(),
                msg: format!("no tensors with prefix '{prefix}'"),
            });
        }
        Ok(g)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.order.iter().any(|n| n.starts_with(prefix))
    }
}

fn file_name_for(tensor_name: &str) -> String {
    format!("{}.motn", tensor_name.replace(['/', ' '], "_"))
}

pub fn save_checkpoint(
    dir: &Path,
    stage: u8,
    step: usize,
    config_ini: &str,
    groups: &[&ParamGroup<f32>],
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut tensors = Vec::new();
    for group in groups {
        for (name, t) in group.iter() {
            let file = file_name_for(name);
            write_tensor(&dir.join(&file), t)?;
            tensors.push((name.clone(), file));
        }
    }
    let meta = CheckpointMeta {
        format: CKPT_FORMAT.to_string(),
        stage,
        step,
        config_ini: config_ini.to_string(),
        tensors,
        extra,
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&meta_path, json).map_err(|e| PipelineError::io(&meta_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| PipelineError::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| PipelineError::Checkpoint {
            path: dir.to_path_buf(),
            msg: format!("bad meta.json: {e}"),
        })?;
    if meta.format != CKPT_FORMAT {
        return Err(PipelineError::Checkpoint {
            path: dir.to_path_buf(),
            msg: format!("unsupported checkpoint format '{}'", meta.format),
        });
    }
    let mut tensors = BTreeMap::new();
    let mut order = Vec::new();
    for (name, file) in &meta.tensors {
        let t = read_tensor_as::<f32>(&dir.join(file))?;
        tensors.insert(name.clone(), t);
        order.push(name.clone());
    }
    Ok(Checkpoint {
        meta,
        tensors,
        order,
    })
}
