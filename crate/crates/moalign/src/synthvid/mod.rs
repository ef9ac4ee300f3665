//! Synthetic moving-shape clips with analytically exact optical flow.
//!
//! Motion is closed form (per-frame translation plus, for disks, rotation
//! about the moving center), so the emitted flow comes from the motion model
//! itself, never from pixel matching. Coordinates are `(x, y)` with `x`
//! along the width axis; flow channel 0 is the x-displacement `u`, channel 1
//! the y-displacement `v`.

mod dataset;
mod render;

pub use dataset::{make_dataset, read_manifest, ClipLabel, DatasetSpec, ManifestEntry, SceneFamily};
pub use render::render_clip;

use moalign_core::{Scalar, Tensor};

use crate::error::{PipelineError, Result};

/// Colors objects can carry; the palette index doubles as the appearance
/// label for disentanglement probes.
pub const PALETTE: [[f64; 3]; 4] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.35, 0.95],
    [0.92, 0.85, 0.25],
];

/// Darker companion shade used for the rotating sector texture of disks;
/// without a texture, rotation about the center would be invisible.
pub const SECTOR_SHADE: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rectangle { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
}

impl ShapeKind {
    /// Radius of the circumscribed circle, for bounds and overlap checks.
    pub fn circumradius(&self) -> f64 {
        match self {
            ShapeKind::Rectangle { half_w, half_h } => (half_w * half_w + half_h * half_h).sqrt(),
            ShapeKind::Disk { radius } => *radius,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Rectangle { .. } => "rectangle",
            ShapeKind::Disk { .. } => "disk",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    /// Center `(x, y)` at frame 0, subpixel.
    pub center: [f64; 2],
    /// Pixels per frame `(vx, vy)`.
    pub velocity: [f64; 2],
    /// Radians per frame about the (moving) center; disks only.
    pub omega: f64,
    /// Initial texture angle for disks.
    pub phase: f64,
    /// Palette index; the appearance label.
    pub color_id: usize,
}

impl ObjectSpec {
    pub fn center_at(&self, frame: f64) -> [f64; 2] {
        [
            self.center[0] + frame * self.velocity[0],
            self.center[1] + frame * self.velocity[1],
        ]
    }

    /// Exact displacement of the material point at `p` (in frame `f`
    /// coordinates) between frames `f` and `f + df`.
    pub fn displacement(&self, p: [f64; 2], f: f64, df: f64) -> [f64; 2] {
        let c_now = self.center_at(f);
        let c_next = self.center_at(f + df);
        let (dx, dy) = (p[0] - c_now[0], p[1] - c_now[1]);
        let a = self.omega * df;
        let (sin, cos) = a.sin_cos();
        [
            c_next[0] + cos * dx - sin * dy - p[0],
            c_next[1] + sin * dx + cos * dy - p[1],
        ]
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: f64,
    pub objects: Vec<ObjectSpec>,
    /// Scene-family token used for class conditioning.
    pub class_id: usize,
}

impl SceneSpec {
    /// Rejects scenes whose objects leave the canvas in any frame, overlap
    /// each other in any frame, or spin a non-disk shape.
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(PipelineError::Scene(format!(
                "a clip needs at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.objects.is_empty() {
            return Err(PipelineError::Scene("scene has no objects".into()));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.color_id >= PALETTE.len() {
                return Err(PipelineError::Scene(format!(
                    "object {i}: color_id {} out of palette range",
                    obj.color_id
                )));
            }
            if obj.omega != 0.0 && !matches!(obj.kind, ShapeKind::Disk { .. }) {
                return Err(PipelineError::Scene(format!(
                    "object {i}: angular velocity is only supported for disks"
                )));
            }
            let r = obj.kind.circumradius() + 1.0; // anti-aliasing margin
            for f in 0..self.frames {
                let c = obj.center_at(f as f64);
                if c[0] - r < 0.0
                    || c[1] - r < 0.0
                    || c[0] + r > self.width as f64
                    || c[1] + r > self.height as f64
                {
                    return Err(PipelineError::Scene(format!(
                        "object {i} leaves the canvas at frame {f} (center {c:?})"
                    )));
                }
            }
        }
        for a in 0..self.objects.len() {
            for b in a + 1..self.objects.len() {
                let (oa, ob) = (&self.objects[a], &self.objects[b]);
                let min_gap = oa.kind.circumradius() + ob.kind.circumradius() + 2.0;
                for f in 0..self.frames {
                    let (ca, cb) = (oa.center_at(f as f64), ob.center_at(f as f64));
                    let d = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
                    if d < min_gap {
                        return Err(PipelineError::Scene(format!(
                            "objects {a} and {b} overlap at frame {f}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Raw video `[F, H, W, C]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoClip<S> {
    pub tensor: Tensor<S>,
}

impl<S: Scalar> VideoClip<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[0] < 2 {
            return Err(PipelineError::Scene(format!(
                "video must be [F>=2, H, W, C], got {s:?}"
            )));
        }
        let lo = S::from_f64(-1e-6);
        let hi = S::from_f64(1.0 + 1e-6);
        if tensor.data().iter().any(|&v| v < lo || v > hi) {
            return Err(PipelineError::Scene("video values outside [0,1]".into()));
        }
        Ok(VideoClip { tensor })
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
    pub fn channels(&self) -> usize {
        self.tensor.shape()[3]
    }

    /// Convolution layout `[1, C, F, H, W]`.
    pub fn to_conv_layout(&self) -> Tensor<S> {
        let g = self.tensor.permuted(&[3, 0, 1, 2]).expect("rank 4");
        let s = g.shape().to_vec();
        g.reshaped(vec![1, s[0], s[1], s[2], s[3]]).expect("same numel")
    }
}

/// Per-pixel displacement `[F-1, 2, H, W]` mapping frame `f` to `f + 1`.
/// Channel 0 is `u` (x), channel 1 is `v` (y). Zero outside the frame-`f`
/// occupancy mask (anti-aliased coverage thresholded at 0.5).
#[derive(Debug, Clone)]
pub struct FlowField<S> {
    pub tensor: Tensor<S>,
}

impl<S: Scalar> FlowField<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[1] != 2 {
            return Err(PipelineError::Scene(format!(
                "flow must be [F-1, 2, H, W], got {s:?}"
            )));
        }
        Ok(FlowField { tensor })
    }

    pub fn pairs(&self) -> usize {
        self.tensor.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}
