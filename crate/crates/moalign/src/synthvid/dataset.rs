//! Dataset generation: sample scene specs from a family distribution,
//! render them, and write (clip, flow, labels) triples plus a manifest.
//!
//! Manifest format: UTF-8 text, one record per line,
//! `clip_path<TAB>flow_path<TAB>label_json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_clip, ObjectSpec, SceneSpec, ShapeKind, PALETTE};
use crate::error::{PipelineError, Result};
use crate::io::write_tensor;
use crate::rngs::{self, tags};

/// A scene family is a (shape kind, color) pair; its index in the family
/// list is the class id used for conditioning and probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SceneFamily {
    Rectangle { color_id: usize },
    Disk { color_id: usize },
}

impl SceneFamily {
    pub fn default_families() -> Vec<(SceneFamily, f64)> {
        let mut fams = Vec::new();
        for color_id in 0..PALETTE.len() {
            fams.push((SceneFamily::Rectangle { color_id }, 1.0));
            fams.push((SceneFamily::Disk { color_id }, 1.0));
        }
        fams
    }
}

/// Geometry plus sampling ranges for dataset generation.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub families: Vec<(SceneFamily, f64)>,
    pub speed_max: f64,
    pub omega_max: f64,
    pub objects_per_clip: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            width: 48,
            height: 32,
            frames: 9,
            families: SceneFamily::default_families(),
            speed_max: 2.0,
            omega_max: 0.1,
            objects_per_clip: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipLabel {
    pub class_id: usize,
    pub kind: String,
    pub color_id: usize,
    /// `(vx, vy)` of the first object, pixels per frame.
    pub velocity: [f64; 2],
    pub omega: f64,
    pub background: f64,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub clip_path: PathBuf,
    pub flow_path: PathBuf,
    pub label: ClipLabel,
}

/// Largest-remainder allocation of `n` clips over family weights; exact up
/// to +-1 per family and deterministic.
fn allocate(families: &[(SceneFamily, f64)], n: usize) -> Vec<usize> {
    let total: f64 = families.iter().map(|(_, w)| w).sum();
    let exact: Vec<f64> = families
        .iter()
        .map(|(_, w)| w / total * n as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..families.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Sample a scene from a family; retries until object placement passes
/// scene validation (non-overlapping, in-canvas over all frames).
pub fn sample_scene(
    spec: &DatasetSpec,
    class_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SceneSpec> {
    let (family, _) = spec.families[class_id];
    for _attempt in 0..200 {
        let background = rng.gen_range(0.05..0.35);
        let mut objects = Vec::with_capacity(spec.objects_per_clip);
        for obj_i in 0..spec.objects_per_clip {
            // first object carries the family; extras are random appearance
            let (kind, color_id, omega) = if obj_i == 0 {
                match family {
                    SceneFamily::Rectangle { color_id } => (
                        ShapeKind::Rectangle {
                            half_w: rng.gen_range(5.0..9.0),
                            half_h: rng.gen_range(4.0..7.5),
                        },
                        color_id,
                        0.0,
                    ),
                    SceneFamily::Disk { color_id } => (
                        ShapeKind::Disk {
                            radius: rng.gen_range(4.5..8.0),
                        },
                        color_id,
                        rng.gen_range(-spec.omega_max..spec.omega_max),
                    ),
                }
            } else if rng.gen_bool(0.5) {
                (
                    ShapeKind::Rectangle {
                        half_w: rng.gen_range(2.5..4.5),
                        half_h: rng.gen_range(2.5..4.5),
                    },
                    rng.gen_range(0..PALETTE.len()),
                    0.0,
                )
            } else {
                (
                    ShapeKind::Disk {
                        radius: rng.gen_range(2.5..4.5),
                    },
                    rng.gen_range(0..PALETTE.len()),
                    rng.gen_range(-spec.omega_max..spec.omega_max),
                )
            };
            // velocity capped so some start position keeps the whole
            // trajectory in-canvas
            let r = kind.circumradius() + 1.5;
            let travel = (spec.frames - 1) as f64;
            let vx_max = spec
                .speed_max
                .min((spec.width as f64 - 2.0 * r - 0.5) / travel);
            let vy_max = spec
                .speed_max
                .min((spec.height as f64 - 2.0 * r - 0.5) / travel);
            if vx_max <= 0.0 || vy_max <= 0.0 {
                objects.clear();
                break;
            }
            let velocity = [
                rng.gen_range(-vx_max..vx_max),
                rng.gen_range(-vy_max..vy_max),
            ];
            let x_lo = r + (-velocity[0] * travel).max(0.0);
            let x_hi = spec.width as f64 - r - (velocity[0] * travel).max(0.0);
            let y_lo = r + (-velocity[1] * travel).max(0.0);
            let y_hi = spec.height as f64 - r - (velocity[1] * travel).max(0.0);
            if x_lo >= x_hi || y_lo >= y_hi {
                objects.clear();
                break;
            }
            objects.push(ObjectSpec {
                kind,
                center: [rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi)],
                velocity,
                omega,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                color_id,
            });
        }
        if objects.len() != spec.objects_per_clip {
            continue;
        }
        let scene = SceneSpec {
            width: spec.width,
            height: spec.height,
            frames: spec.frames,
            background,
            objects,
            class_id,
        };
        if scene.validate().is_ok() {
            return Ok(scene);
        }
    }
    Err(PipelineError::Scene(format!(
        "could not place {} non-overlapping objects after 200 attempts",
        spec.objects_per_clip
    )))
}

/// Generate `n_clips` (clip, flow, labels) triples under `dir`, writing
/// `manifest.tsv` plus `clips/` and `flows/` in the MOTN format (f32).
/// Fully reproducible from `seed`; clip rendering may run in parallel since
/// each clip derives its own stream.
pub fn make_dataset(
    dir: &Path,
    n_clips: usize,
    spec: &DatasetSpec,
    seed: u64,
    parallel: bool,
) -> Result<PathBuf> {
    if n_clips == 0 {
        return Err(PipelineError::Scene("n_clips must be >= 1".into()));
    }
    let clips_dir = dir.join("clips");
    let flows_dir = dir.join("flows");
    fs::create_dir_all(&clips_dir).map_err(|e| PipelineError::io(&clips_dir, e))?;
    fs::create_dir_all(&flows_dir).map_err(|e| PipelineError::io(&flows_dir, e))?;

    // class per clip: exact largest-remainder counts, order shuffled
    let counts = allocate(&spec.families, n_clips);
    let mut classes: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(ci, &c)| std::iter::repeat(ci).take(c))
        .collect();
    let mut order_rng = rngs::derive(seed, tags::SCENE, u64::MAX);
    for i in (1..classes.len()).rev() {
        let j = order_rng.gen_range(0..=i);
        classes.swap(i, j);
    }

    let render_one = |i: usize| -> Result<ManifestEntry> {
        let mut rng = rngs::derive(seed, tags::SCENE, i as u64);
        let scene = sample_scene(spec, classes[i], &mut rng)?;
        let (clip, flow) = render_clip::<f32>(&scene)?;
        let clip_path = clips_dir.join(format!("clip_{i:05}.motn"));
        let flow_path = flows_dir.join(format!("flow_{i:05}.motn"));
        write_tensor(&clip_path, &clip.tensor)?;
        write_tensor(&flow_path, &flow.tensor)?;
        let first = &scene.objects[0];
        Ok(ManifestEntry {
            clip_path,
            flow_path,
            label: ClipLabel {
                class_id: scene.class_id,
                kind: first.kind.name().to_string(),
                color_id: first.color_id,
                velocity: first.velocity,
                omega: first.omega,
                background: scene.background,
            },
        })
    };

    let entries: Vec<ManifestEntry> = if parallel {
        (0..n_clips)
            .into_par_iter()
            .map(render_one)
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..n_clips).map(render_one).collect::<Result<Vec<_>>>()?
    };

    let manifest_path = dir.join("manifest.tsv");
    let mut out = String::new();
    for e in &entries {
        let label = serde_json::to_string(&e.label).expect("label serializes");
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            rel_to(dir, &e.clip_path),
            rel_to(dir, &e.flow_path),
            label
        ));
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| PipelineError::io(&manifest_path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| PipelineError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn rel_to(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

/// Parse a manifest; paths resolve relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (clip, flow, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(f), Some(l)) => (c, f, l),
            _ => {
                return Err(PipelineError::Manifest {
                    path: path.to_path_buf(),
                    msg: format!("line {}: expected 3 tab-separated fields", ln + 1),
                })
            }
        };
        let label: ClipLabel =
            serde_json::from_str(label).map_err(|e| PipelineError::Manifest {
                path: path.to_path_buf(),
                msg: format!("line {}: bad label json: {e}", ln + 1),
            })?;
        entries.push(ManifestEntry {
            clip_path: base.join(clip),
            flow_path: base.join(flow),
            label,
        });
    }
    if entries.is_empty() {
        return Err(PipelineError::Manifest {
            path: path.to_path_buf(),
            msg: "manifest is empty".into(),
        });
    }
    Ok(entries)
}
