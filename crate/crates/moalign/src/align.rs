//! Relational alignment losses.
//!
//! Token similarity is cosine similarity with eps-clamped norms. The
//! temporal weight matrix zeroes every intra-frame pair and decays as
//! `exp(-frame_distance / tau)` across frames; the relational loss compares
//! per-frame spatial similarity matrices plus the weighted temporal matrix
//! of the aligned features against those of the (constant) motion features.
//! The unweighted variant keeps the intra-frame exclusion but sets every
//! cross-frame weight to 1, which is exactly the `tau -> infinity` limit.

use moalign_core::{matmul, Scalar, Tape, Tensor, TensorId};

use crate::error::{PipelineError, Result};
use crate::optim::ParamGroup;
use crate::rngs::{self, tags};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau {
    Finite(f64),
    Infinite,
}

impl Tau {
    pub fn validate(self) -> Result<Self> {
        if let Tau::Finite(t) = self {
            if !(t > 0.0) {
                return Err(PipelineError::Config(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        Ok(self)
    }
}

/// Normalization of the temporal term: mean over all matrix entries
/// (zeroed intra-frame entries included), or over cross-frame entries only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalNorm {
    AllEntries,
    MaskedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Spatial { frame: usize },
    Temporal,
}

/// Pairwise cosine-similarity matrix over a token set.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix<S> {
    pub kind: SimilarityKind,
    pub matrix: Tensor<S>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn side(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Check the structural invariants: symmetry, unit diagonal for nonzero
    /// tokens, entries within [-1, 1] up to rounding.
    pub fn validate(&self, tokens: &Tensor<S>) -> Result<()> {
        let n = self.side();
        let m = &self.matrix;
        let d = tokens.shape()[1];
        for i in 0..n {
            for j in 0..n {
                let v = m.at(&[i, j]).to_f64();
                if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&v) {
                    return Err(PipelineError::Config(format!(
                        "similarity [{i},{j}] = {v} outside [-1, 1]"
                    )));
                }
                let w = m.at(&[j, i]).to_f64();
                if (v - w).abs() > 1e-6 {
                    return Err(PipelineError::Config(format!(
                        "similarity not symmetric at [{i},{j}]: {v} vs {w}"
                    )));
                }
            }
            let row_zero = (0..d).all(|c| tokens.at(&[i, c]) == S::zero());
            if !row_zero {
                let diag = m.at(&[i, i]).to_f64();
                if (diag - 1.0).abs() > 1e-6 {
                    return Err(PipelineError::Config(format!(
                        "diagonal [{i}] = {diag} for a nonzero token"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Scale every row of `[N, D]` to unit norm with the denominator clamped at
/// `eps`; mirrors the tape's `row_normalize` exactly.
pub fn normalize_rows<S: Scalar>(tokens: &Tensor<S>, eps: f64) -> Tensor<S> {
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let x = tokens.data();
    let eps_s = S::from_f64(eps);
    let mut out = vec![S::zero(); n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut acc = S::zero();
        for &v in row {
            acc = acc + v * v;
        }
        let nr = acc.sqrt().max(eps_s);
        for j in 0..d {
            out[i * d + j] = row[j] / nr;
        }
    }
    Tensor::new(vec![n, d], out).expect("shape")
}

fn gram<S: Scalar>(normalized: &Tensor<S>) -> Tensor<S> {
    let t = {
        let (n, d) = (normalized.shape()[0], normalized.shape()[1]);
        let x = normalized.data();
        Tensor::from_fn(&[d, n], |i| {
            let (r, c) = (i / n, i % n);
            x[c * d + r]
        })
    };
    matmul(normalized, &t)
}

/// Spatial similarity matrix of one frame's tokens `[N_s, D]`.
pub fn spatial_similarity<S: Scalar>(
    frame_tokens: &Tensor<S>,
    frame: usize,
    eps: f64,
) -> Result<SimilarityMatrix<S>> {
    if frame_tokens.shape().len() != 2 {
        return Err(PipelineError::Config(format!(
            "expected a token matrix, got {:?}",
            frame_tokens.shape()
        )));
    }
    Ok(SimilarityMatrix {
        kind: SimilarityKind::Spatial { frame },
        matrix: gram(&normalize_rows(frame_tokens, eps)),
    })
}

/// Temporal similarity matrix over the full flattened token sequence
/// `[N_t, D]` (frame-major order).
pub fn temporal_similarity<S: Scalar>(
    tokens: &Tensor<S>,
    eps: f64,
) -> Result<SimilarityMatrix<S>> {
    if tokens.shape().len() != 2 {
        return Err(PipelineError::Config(format!(
            "expected a token matrix, got {:?}",
            tokens.shape()
        )));
    }
    Ok(SimilarityMatrix {
        kind: SimilarityKind::Temporal,
        matrix: gram(&normalize_rows(tokens, eps)),
    })
}

/// Temporal weight matrix for a token grid: zero within a frame,
/// `exp(-|frame_i - frame_j| / tau)` across frames (1 across frames in the
/// infinite-temperature / unweighted case).
#[derive(Debug, Clone)]
pub struct TemporalWeightMatrix<S> {
    pub matrix: Tensor<S>,
    pub tau: Tau,
    pub grid: [usize; 3],
}

pub fn temporal_weights<S: Scalar>(grid: [usize; 3], tau: Tau) -> Result<TemporalWeightMatrix<S>> {
    let tau = tau.validate()?;
    let [f, h, w] = grid;
    let per_frame = h * w;
    let n = f * per_frame;
    let matrix = Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let delta = (i / per_frame).abs_diff(j / per_frame);
        if delta == 0 {
            S::zero()
        } else {
            match tau {
                Tau::Finite(t) => S::from_f64((-(delta as f64) / t).exp()),
                Tau::Infinite => S::one(),
            }
        }
    });
    Ok(TemporalWeightMatrix { matrix, tau, grid })
}

fn cross_frame_pairs(grid: [usize; 3]) -> usize {
    let [f, h, w] = grid;
    let per_frame = h * w;
    let n = f * per_frame;
    n * n - f * per_frame * per_frame
}

/// Constant targets for the alignment loss, computed once per clip from the
/// (frozen) motion features.
#[derive(Debug, Clone)]
pub struct AlignTargets<S> {
    pub grid: [usize; 3],
    pub spatial: Vec<Tensor<S>>,
    pub temporal: Tensor<S>,
    pub weights: Tensor<S>,
    pub cross_frame_pairs: usize,
}

pub fn precompute_align_targets<S: Scalar>(
    m_tokens: &Tensor<S>,
    grid: [usize; 3],
    tau: Tau,
    eps: f64,
) -> Result<AlignTargets<S>> {
    let [f, h, w] = grid;
    let per_frame = h * w;
    let n = f * per_frame;
    if m_tokens.shape()[0] != n {
        return Err(PipelineError::Config(format!(
            "token count {} does not match grid {grid:?}",
            m_tokens.shape()[0]
        )));
    }
    let normalized = normalize_rows(m_tokens, eps);
    let d = m_tokens.shape()[1];
    let mut spatial = Vec::with_capacity(f);
    for fr in 0..f {
        let rows = Tensor::new(
            vec![per_frame, d],
            normalized.data()[fr * per_frame * d..(fr + 1) * per_frame * d].to_vec(),
        )?;
        spatial.push(gram(&rows));
    }
    let temporal = gram(&normalized);
    let weights = temporal_weights::<S>(grid, tau)?.matrix;
    Ok(AlignTargets {
        grid,
        spatial,
        temporal,
        weights,
        cross_frame_pairs: cross_frame_pairs(grid),
    })
}

/// Relational alignment loss on the tape, differentiable with respect to
/// the aligned tokens only:
///
/// `  (1/F) sum_f mean |S_Z_spatial(f) - S_M_spatial(f)|`
/// `+ mean |W . S_Z_temporal - W . S_M_temporal|`
///
/// The temporal term is evaluated in row blocks of `block_rows`; per-row
/// sums are folded in a fixed order, so the result is bitwise independent
/// of the block size.
pub fn soft_trd_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    z_tokens: TensorId,
    targets: &AlignTargets<S>,
    norm: TemporalNorm,
    block_rows: usize,
    eps: f64,
) -> Result<TensorId> {
    let [f, h, w] = targets.grid;
    let per_frame = h * w;
    let n = f * per_frame;
    let zs = tape.value(z_tokens).shape();
    if zs[0] != n {
        return Err(PipelineError::Config(format!(
            "aligned tokens {zs:?} do not match grid {:?}",
            targets.grid
        )));
    }

    let normalized = tape.row_normalize(z_tokens, eps)?;

    // spatial term
    let mut frame_means = Vec::with_capacity(f);
    for fr in 0..f {
        let rows = tape.slice_rows(normalized, fr * per_frame, (fr + 1) * per_frame)?;
        let rows_t = tape.transpose2(rows)?;
        let sim = tape.matmul(rows, rows_t)?;
        let target = tape.constant(targets.spatial[fr].clone());
        let diff = tape.sub(sim, target)?;
        let a = tape.abs(diff);
        frame_means.push(tape.mean(a));
    }
    let spatial_sum = tape.sum_elems(&frame_means)?;
    let spatial_term = tape.scale(spatial_sum, S::from_f64(1.0 / f as f64));

    // temporal term, blocked over rows
    let block = block_rows.max(1);
    let normalized_t = tape.transpose2(normalized)?;
    let mut row_sums = Vec::new();
    let mut r = 0;
    while r < n {
        let hi = (r + block).min(n);
        let rows = tape.slice_rows(normalized, r, hi)?;
        let sim = tape.matmul(rows, normalized_t)?;
        let target = tape.constant(slice_rows_plain(&targets.temporal, r, hi));
        let diff = tape.sub(sim, target)?;
        let wts = tape.constant(slice_rows_plain(&targets.weights, r, hi));
        let weighted = tape.mul(diff, wts)?;
        let a = tape.abs(weighted);
        row_sums.push(tape.sum_rows(a)?);
        r = hi;
    }
    let temporal_sum = tape.sum_elems(&row_sums)?;
    let denom = match norm {
        TemporalNorm::AllEntries => (n * n) as f64,
        TemporalNorm::MaskedMean => targets.cross_frame_pairs.max(1) as f64,
    };
    let temporal_term = tape.scale(temporal_sum, S::from_f64(1.0 / denom));

    tape.add(spatial_term, temporal_term).map_err(Into::into)
}

/// Unweighted relational loss: the `tau -> infinity` limit of the soft
/// variant (cross-frame weights 1, intra-frame pairs still excluded).
pub fn trd_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    z_tokens: TensorId,
    targets_unweighted: &AlignTargets<S>,
    norm: TemporalNorm,
    block_rows: usize,
    eps: f64,
) -> Result<TensorId> {
    debug_assert_eq!(targets_unweighted_tau(targets_unweighted), Tau::Infinite);
    soft_trd_loss_on(tape, z_tokens, targets_unweighted, norm, block_rows, eps)
}

fn targets_unweighted_tau<S: Scalar>(t: &AlignTargets<S>) -> Tau {
    // weights hold only zeros and ones in the unweighted case
    let all_binary = t
        .weights
        .data()
        .iter()
        .all(|&v| v == S::zero() || v == S::one());
    if all_binary {
        Tau::Infinite
    } else {
        Tau::Finite(f64::NAN)
    }
}

/// Plain (untracked) evaluation of the relational loss.
pub fn soft_trd_loss<S: Scalar>(
    z_tokens: &Tensor<S>,
    m_tokens: &Tensor<S>,
    grid: [usize; 3],
    tau: Tau,
    norm: TemporalNorm,
    eps: f64,
) -> Result<S> {
    if z_tokens.shape() != m_tokens.shape() {
        return Err(PipelineError::Config(format!(
            "token shapes differ: {:?} vs {:?}",
            z_tokens.shape(),
            m_tokens.shape()
        )));
    }
    let targets = precompute_align_targets(m_tokens, grid, tau, eps)?;
    let mut tape = Tape::new();
    let z = tape.constant(z_tokens.clone());
    let loss = soft_trd_loss_on(&mut tape, z, &targets, norm, grid[0] * grid[1] * grid[2], eps)?;
    Ok(tape.value(loss).data()[0])
}

pub fn trd_loss<S: Scalar>(
    z_tokens: &Tensor<S>,
    m_tokens: &Tensor<S>,
    grid: [usize; 3],
    norm: TemporalNorm,
    eps: f64,
) -> Result<S> {
    soft_trd_loss(z_tokens, m_tokens, grid, Tau::Infinite, norm, eps)
}

// ── patchwise cosine alignment (feature matching baseline) ─────────

/// Trainable linear projector used by the patchwise cosine-alignment loss.
#[derive(Debug)]
pub struct RepaProjector<S> {
    pub d_in: usize,
    pub d_out: usize,
    pub params: ParamGroup<S>,
}

pub struct RepaProjectorIds {
    ids: Vec<TensorId>,
}

impl RepaProjectorIds {
    pub fn raw(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn from_raw(ids: Vec<TensorId>) -> Self {
        RepaProjectorIds { ids }
    }
}

impl<S: Scalar> RepaProjector<S> {
    pub fn init(seed: u64, d_in: usize, d_out: usize) -> Self {
        let mut rng = rngs::derive(seed, tags::REPA_PROJECTOR, 0);
        let mut params = ParamGroup::new();
        params.push(
            "repa.weight",
            crate::encoder::uniform_init::<S>(&[d_in, d_out], d_in, &mut rng),
        );
        params.push(
            "repa.bias",
            crate::encoder::uniform_init::<S>(&[d_out], d_in, &mut rng),
        );
        RepaProjector { d_in, d_out, params }
    }

    pub fn from_params(d_in: usize, d_out: usize, params: ParamGroup<S>) -> Self {
        RepaProjector { d_in, d_out, params }
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> RepaProjectorIds {
        RepaProjectorIds {
            ids: self.params.register(tape, trainable),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape<S>,
        ids: &RepaProjectorIds,
        student: TensorId,
    ) -> Result<TensorId> {
        let y = tape.matmul(student, ids.ids[0])?;
        tape.bias_add_cols(y, ids.ids[1]).map_err(Into::into)
    }
}

/// `-(1/N) sum_n cos(teacher_n, student_n)`: maximizing per-token cosine
/// similarity between corresponding rows. Student rows are the projected
/// hidden states; the teacher is a constant.
pub fn repa_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: TensorId,
    projected_student: TensorId,
    eps: f64,
) -> Result<TensorId> {
    let (ts, ss) = (
        tape.value(teacher).shape().to_vec(),
        tape.value(projected_student).shape().to_vec(),
    );
    if ts != ss {
        return Err(PipelineError::Config(format!(
            "token count/width mismatch: teacher {ts:?} vs student {ss:?}"
        )));
    }
    let n = ts[0];
    let mut cosines = Vec::with_capacity(n);
    for i in 0..n {
        let t_row = tape.slice_rows(teacher, i, i + 1)?;
        let s_row = tape.slice_rows(projected_student, i, i + 1)?;
        cosines.push(tape.cosine_pair(t_row, s_row, eps)?);
    }
    let total = tape.sum_elems(&cosines)?;
    Ok(tape.scale(total, S::from_f64(-1.0 / n as f64)))
}

/// Plain evaluation over already-projected student rows.
pub fn repa_loss<S: Scalar>(teacher: &Tensor<S>, student: &Tensor<S>, eps: f64) -> Result<S> {
    let mut tape = Tape::new();
    let t = tape.constant(teacher.clone());
    let s = tape.constant(student.clone());
    let l = repa_loss_on(&mut tape, t, s, eps)?;
    Ok(tape.value(l).data()[0])
}

// ── total objective ────────────────────────────────────────────────

pub fn total_loss<S: Scalar>(l_diff: S, l_align: S, lambda: f64) -> Result<S> {
    if lambda < 0.0 {
        return Err(PipelineError::Config(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(l_diff + S::from_f64(lambda) * l_align)
}

pub fn total_loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    l_diff: TensorId,
    l_align: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    if lambda < 0.0 {
        return Err(PipelineError::Config(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let scaled = tape.scale(l_align, S::from_f64(lambda));
    tape.add(l_diff, scaled).map_err(Into::into)
}

fn slice_rows_plain<S: Scalar>(m: &Tensor<S>, start: usize, end: usize) -> Tensor<S> {
    let cols = m.shape()[1];
    Tensor::new(
        vec![end - start, cols],
        m.data()[start * cols..end * cols].to_vec(),
    )
    .expect("validated bounds")
}
