//! Reverse-mode differentiation record.
//!
//! Every operation appends a node holding its result and the ids of its
//! inputs; inputs therefore always precede their consumers, and replaying the
//! node list in reverse order is a reverse topological traversal. `backward`
//! seeds the scalar loss with 1 and accumulates one cotangent contribution
//! per use-site into each input. Gradients are retained for gradient-tracked
//! leaves; intermediate cotangents are dropped as soon as they are consumed.

use crate::conv;
use crate::error::{Result, TensorError};
use crate::interp;
use crate::patch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, S),
    Abs(TensorId),
    Square(TensorId),
    Relu(TensorId),
    Silu(TensorId),
    SumElems(Vec<TensorId>),
    SumRows(TensorId),
    Mean(TensorId),
    Matmul(TensorId, TensorId),
    Transpose2(TensorId),
    SoftmaxRows(TensorId),
    RmsNormRows {
        x: TensorId,
        eps: f64,
    },
    RowNormalize {
        x: TensorId,
        eps: f64,
    },
    CosinePair {
        a: TensorId,
        b: TensorId,
        eps: f64,
    },
    SliceRows {
        x: TensorId,
        start: usize,
    },
    Reshape(TensorId),
    Permute {
        x: TensorId,
        perm: Vec<usize>,
    },
    BiasAddCols(TensorId, TensorId),
    BiasAddChan(TensorId, TensorId),
    EmbedRow {
        table: TensorId,
        row: usize,
    },
    Conv3d {
        input: TensorId,
        kernel: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    },
    ConvTranspose3d {
        input: TensorId,
        kernel: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    },
    Trilinear(TensorId),
    Patchify {
        x: TensorId,
        patch: [usize; 3],
    },
    Unpatchify {
        x: TensorId,
        patch: [usize; 3],
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss with respect to a gradient-tracked leaf;
    /// available after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Invalid {
                op,
                msg: format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    // ── elementwise ────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, self.needs(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, self.needs(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, self.needs(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> TensorId {
        let v = self.value(x).map(|v| v * c);
        self.push(v, self.needs(&[x]), Op::Scale(x, c))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(|v| v.abs());
        self.push(v, self.needs(&[x]), Op::Abs(x))
    }

    pub fn square(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(|v| v * v);
        self.push(v, self.needs(&[x]), Op::Square(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(|v| v.max(S::zero()));
        self.push(v, self.needs(&[x]), Op::Relu(x))
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(|v| v * sigmoid(v));
        self.push(v, self.needs(&[x]), Op::Silu(x))
    }

    // ── reductions ─────────────────────────────────────────────────

    /// Sum of every element of every input, folded in argument order then
    /// row-major element order. The fold order is fixed so that blocked and
    /// dense formulations of the same reduction agree bitwise.
    pub fn sum_elems(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "sum_elems",
                msg: "at least one input required".into(),
            });
        }
        let mut acc = S::zero();
        for id in ids {
            for &v in self.value(*id).data() {
                acc = acc + v;
            }
        }
        Ok(self.push(
            Tensor::scalar(acc),
            self.needs(ids),
            Op::SumElems(ids.to_vec()),
        ))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        self.sum_elems(&[x]).expect("single input")
    }

    /// Row sums of a matrix: `[N, M] -> [N]`.
    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "sum_rows",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (n, m) = (s[0], s[1]);
        let d = self.value(x).data();
        let v = Tensor::from_fn(&[n], |i| {
            let mut acc = S::zero();
            for j in 0..m {
                acc = acc + d[i * m + j];
            }
            acc
        });
        Ok(self.push(v, self.needs(&[x]), Op::SumRows(x)))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).numel();
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let v = Tensor::scalar(acc / S::from_f64(n as f64));
        self.push(v, self.needs(&[x]), Op::Mean(x))
    }

    // ── linear algebra ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Invalid {
                op: "matmul",
                msg: format!("expected matrices, got {sa:?} x {sb:?}"),
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                axis: "k",
                msg: format!("inner dims differ: {} vs {}", sa[1], sb[0]),
            });
        }
        let v = matmul_kernel(self.value(a), self.value(b));
        Ok(self.push(v, self.needs(&[a, b]), Op::Matmul(a, b)))
    }

    pub fn transpose2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose2",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let v = transpose_kernel(self.value(x));
        Ok(self.push(v, self.needs(&[x]), Op::Transpose2(x)))
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax_rows",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (n, m) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut z = S::zero();
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z = z + e;
            }
            for j in 0..m {
                out[i * m + j] = out[i * m + j] / z;
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, self.needs(&[x]), Op::SoftmaxRows(x)))
    }

    /// Per-row RMS normalization without gain: `y = x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm_rows(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "rms_norm_rows",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (n, m) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let r = rms(row, eps);
            for j in 0..m {
                out[i * m + j] = row[j] / r;
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, self.needs(&[x]), Op::RmsNormRows { x, eps }))
    }

    /// Per-row scaling to unit Euclidean norm, with the denominator clamped
    /// to `eps` so zero rows stay (near) zero instead of producing NaN.
    pub fn row_normalize(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "row_normalize",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (n, m) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let nr = norm(row).max(S::from_f64(eps));
            for j in 0..m {
                out[i * m + j] = row[j] / nr;
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, self.needs(&[x]), Op::RowNormalize { x, eps }))
    }

    /// Cosine similarity of two same-shape tensors viewed as flat vectors:
    /// `<a,b> / (max(|a|, eps) * max(|b|, eps))`.
    pub fn cosine_pair(&mut self, a: TensorId, b: TensorId, eps: f64) -> Result<TensorId> {
        self.same_shape("cosine_pair", a, b)?;
        let c = cosine_kernel(self.value(a).data(), self.value(b).data(), eps);
        Ok(self.push(
            Tensor::scalar(c),
            self.needs(&[a, b]),
            Op::CosinePair { a, b, eps },
        ))
    }

    // ── structure ──────────────────────────────────────────────────

    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{end} invalid for shape {s:?}"),
            });
        }
        let m = s[1];
        let v = Tensor::new(
            vec![end - start, m],
            self.value(x).data()[start * m..end * m].to_vec(),
        )?;
        Ok(self.push(v, self.needs(&[x]), Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, self.needs(&[x]), Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let v = self.value(x).permuted(perm)?;
        Ok(self.push(
            v,
            self.needs(&[x]),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Add a `[D]` bias to every row of `[N, D]`.
    pub fn bias_add_cols(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || self.value(bias).numel() != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add_cols",
                axis: "d",
                msg: format!("input {sx:?} incompatible with bias {sb:?}"),
            });
        }
        let (n, m) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let v = Tensor::from_fn(&[n, m], |i| xd[i] + bd[i % m]);
        Ok(self.push(v, self.needs(&[x, bias]), Op::BiasAddCols(x, bias)))
    }

    /// Add a `[C]` bias across channel axis 1 of `[B, C, T, H, W]`.
    pub fn bias_add_chan(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 5 || self.value(bias).numel() != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add_chan",
                axis: "c",
                msg: format!(
                    "input {sx:?} incompatible with bias {:?}",
                    self.value(bias).shape()
                ),
            });
        }
        let inner: usize = sx[2] * sx[3] * sx[4];
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let v = Tensor::from_fn(&sx, |i| xd[i] + bd[(i / inner) % sx[1]]);
        Ok(self.push(v, self.needs(&[x, bias]), Op::BiasAddChan(x, bias)))
    }

    /// Select row `row` of a `[V, D]` table as `[1, D]`.
    pub fn embed_row(&mut self, table: TensorId, row: usize) -> Result<TensorId> {
        let s = self.value(table).shape();
        if s.len() != 2 || row >= s[0] {
            return Err(TensorError::Invalid {
                op: "embed_row",
                msg: format!("row {row} out of range for table {s:?}"),
            });
        }
        let m = s[1];
        let v = Tensor::new(
            vec![1, m],
            self.value(table).data()[row * m..(row + 1) * m].to_vec(),
        )?;
        Ok(self.push(v, self.needs(&[table]), Op::EmbedRow { table, row }))
    }

    // ── grid operators ─────────────────────────────────────────────

    pub fn conv3d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        let v = conv::conv3d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            v,
            self.needs(&[input, kernel]),
            Op::Conv3d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn conv_transpose3d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        let v = conv::conv_transpose3d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            v,
            self.needs(&[input, kernel]),
            Op::ConvTranspose3d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn trilinear(&mut self, x: TensorId, target: [usize; 3]) -> Result<TensorId> {
        let v = interp::trilinear(self.value(x), target)?;
        Ok(self.push(v, self.needs(&[x]), Op::Trilinear(x)))
    }

    pub fn patchify(&mut self, x: TensorId, patch: [usize; 3]) -> Result<TensorId> {
        let v = patch::patchify(self.value(x), patch)?;
        Ok(self.push(v, self.needs(&[x]), Op::Patchify { x, patch }))
    }

    pub fn unpatchify(
        &mut self,
        x: TensorId,
        patch: [usize; 3],
        grid: [usize; 3],
        channels: usize,
    ) -> Result<TensorId> {
        let v = patch::unpatchify(self.value(x), patch, grid, channels)?;
        Ok(self.push(v, self.needs(&[x]), Op::Unpatchify { x, patch }))
    }

    // ── backward ───────────────────────────────────────────────────

    /// Populate gradients of `loss` with respect to every gradient-tracked
    /// leaf. Errors on a non-scalar loss and on repeated invocation.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                self.grads[i] = None;
                continue;
            }
            if self.grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep the gradient for the caller
            }
            let g = self.grads[i].take().expect("checked above");
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor<S>) {
        // Split borrows: node values are read-only here, grads are written.
        macro_rules! val {
            ($id:expr) => {
                &self.nodes[$id.0].value
            };
        }
        let out_val = &self.nodes[i].value;
        let mut contribs: Vec<(TensorId, Tensor<S>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                contribs.push((*a, g.clone()));
                contribs.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                contribs.push((*a, g.clone()));
                contribs.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                contribs.push((*a, zip(g, val!(b), |gv, bv| gv * bv)));
                contribs.push((*b, zip(g, val!(a), |gv, av| gv * av)));
            }
            Op::Scale(x, c) => {
                let c = *c;
                contribs.push((*x, g.map(|v| v * c)));
            }
            Op::Abs(x) => {
                contribs.push((
                    *x,
                    zip(g, val!(x), |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else if xv < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    }),
                ));
            }
            Op::Square(x) => {
                let two = S::from_f64(2.0);
                contribs.push((*x, zip(g, val!(x), |gv, xv| two * gv * xv)));
            }
            Op::Relu(x) => {
                // subgradient at 0 is 0
                contribs.push((
                    *x,
                    zip(g, val!(x), |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    }),
                ));
            }
            Op::Silu(x) => {
                contribs.push((
                    *x,
                    zip(g, val!(x), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (S::one() + xv * (S::one() - s))
                    }),
                ));
            }
            Op::SumElems(ids) => {
                let gv = g.data()[0];
                for id in ids {
                    contribs.push((*id, Tensor::full(val!(id).shape(), gv)));
                }
            }
            Op::SumRows(x) => {
                let s = val!(x).shape();
                let (n, m) = (s[0], s[1]);
                let gd = g.data();
                contribs.push((*x, Tensor::from_fn(&[n, m], |i| gd[i / m])));
            }
            Op::Mean(x) => {
                let n = val!(x).numel();
                let gv = g.data()[0] / S::from_f64(n as f64);
                contribs.push((*x, Tensor::full(val!(x).shape(), gv)));
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    contribs.push((a, matmul_nt_kernel(g, val!(b))));
                }
                if self.nodes[b.0].requires_grad {
                    contribs.push((b, matmul_tn_kernel(val!(a), g)));
                }
            }
            Op::Transpose2(x) => {
                contribs.push((*x, transpose_kernel(g)));
            }
            Op::SoftmaxRows(x) => {
                let y = out_val;
                let s = y.shape();
                let (n, m) = (s[0], s[1]);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![S::zero(); n * m];
                for r in 0..n {
                    let mut dot = S::zero();
                    for j in 0..m {
                        dot = dot + gd[r * m + j] * yd[r * m + j];
                    }
                    for j in 0..m {
                        gx[r * m + j] = yd[r * m + j] * (gd[r * m + j] - dot);
                    }
                }
                contribs.push((*x, Tensor::new(vec![n, m], gx).expect("shape")));
            }
            Op::RmsNormRows { x, eps } => {
                let xv = val!(x);
                let s = xv.shape();
                let (n, m) = (s[0], s[1]);
                let (xd, gd) = (xv.data(), g.data());
                let mut gx = vec![S::zero(); n * m];
                let mf = S::from_f64(m as f64);
                for r in 0..n {
                    let row = &xd[r * m..(r + 1) * m];
                    let rv = rms(row, *eps);
                    let mut dot = S::zero();
                    for j in 0..m {
                        dot = dot + gd[r * m + j] * row[j];
                    }
                    let k = dot / (mf * rv * rv * rv);
                    for j in 0..m {
                        gx[r * m + j] = gd[r * m + j] / rv - row[j] * k;
                    }
                }
                contribs.push((*x, Tensor::new(vec![n, m], gx).expect("shape")));
            }
            Op::RowNormalize { x, eps } => {
                let xv = val!(x);
                let s = xv.shape();
                let (n, m) = (s[0], s[1]);
                let (xd, gd) = (xv.data(), g.data());
                let eps_s = S::from_f64(*eps);
                let mut gx = vec![S::zero(); n * m];
                for r in 0..n {
                    let row = &xd[r * m..(r + 1) * m];
                    let nr = norm(row);
                    if nr > eps_s {
                        let mut dot = S::zero();
                        for j in 0..m {
                            dot = dot + gd[r * m + j] * row[j];
                        }
                        let k = dot / (nr * nr * nr);
                        for j in 0..m {
                            gx[r * m + j] = gd[r * m + j] / nr - row[j] * k;
                        }
                    } else {
                        // the clamped denominator is constant here
                        for j in 0..m {
                            gx[r * m + j] = gd[r * m + j] / eps_s;
                        }
                    }
                }
                contribs.push((*x, Tensor::new(vec![n, m], gx).expect("shape")));
            }
            Op::CosinePair { a, b, eps } => {
                let (a, b) = (*a, *b);
                let gv = g.data()[0];
                let (ad, bd) = (val!(a).data(), val!(b).data());
                let eps_s = S::from_f64(*eps);
                let (na, nb) = (norm(ad), norm(bd));
                let (ma, mb) = (na.max(eps_s), nb.max(eps_s));
                let mut dot = S::zero();
                for j in 0..ad.len() {
                    dot = dot + ad[j] * bd[j];
                }
                let shape = val!(a).shape().to_vec();
                if self.nodes[a.0].requires_grad {
                    let ka = if na > eps_s {
                        dot / (ma * ma * mb * na)
                    } else {
                        S::zero()
                    };
                    let ga: Vec<S> = (0..ad.len())
                        .map(|j| gv * (bd[j] / (ma * mb) - ad[j] * ka))
                        .collect();
                    contribs.push((a, Tensor::new(shape.clone(), ga).expect("shape")));
                }
                if self.nodes[b.0].requires_grad {
                    let kb = if nb > eps_s {
                        dot / (mb * mb * ma * nb)
                    } else {
                        S::zero()
                    };
                    let gb: Vec<S> = (0..bd.len())
                        .map(|j| gv * (ad[j] / (ma * mb) - bd[j] * kb))
                        .collect();
                    contribs.push((b, Tensor::new(shape, gb).expect("shape")));
                }
            }
            Op::SliceRows { x, start } => {
                let s = val!(x).shape();
                let (n, m) = (s[0], s[1]);
                let rows = g.shape()[0];
                let gd = g.data();
                let mut gx = vec![S::zero(); n * m];
                gx[start * m..(start + rows) * m].copy_from_slice(gd);
                contribs.push((*x, Tensor::new(vec![n, m], gx).expect("shape")));
            }
            Op::Reshape(x) => {
                let shape = val!(x).shape().to_vec();
                contribs.push((*x, g.reshaped(shape).expect("same numel")));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                contribs.push((*x, g.permuted(&inv).expect("valid permutation")));
            }
            Op::BiasAddCols(x, bias) => {
                let (x, bias) = (*x, *bias);
                if self.nodes[x.0].requires_grad {
                    contribs.push((x, g.clone()));
                }
                if self.nodes[bias.0].requires_grad {
                    let s = g.shape();
                    let (n, m) = (s[0], s[1]);
                    let gd = g.data();
                    let mut gb = vec![S::zero(); m];
                    for r in 0..n {
                        for j in 0..m {
                            gb[j] = gb[j] + gd[r * m + j];
                        }
                    }
                    let shape = val!(bias).shape().to_vec();
                    contribs.push((bias, Tensor::new(shape, gb).expect("shape")));
                }
            }
            Op::BiasAddChan(x, bias) => {
                let (x, bias) = (*x, *bias);
                if self.nodes[x.0].requires_grad {
                    contribs.push((x, g.clone()));
                }
                if self.nodes[bias.0].requires_grad {
                    let s = g.shape();
                    let (b_n, c_n) = (s[0], s[1]);
                    let inner: usize = s[2] * s[3] * s[4];
                    let gd = g.data();
                    let mut gb = vec![S::zero(); c_n];
                    for b in 0..b_n {
                        for c in 0..c_n {
                            let base = (b * c_n + c) * inner;
                            for k in 0..inner {
                                gb[c] = gb[c] + gd[base + k];
                            }
                        }
                    }
                    let shape = val!(bias).shape().to_vec();
                    contribs.push((bias, Tensor::new(shape, gb).expect("shape")));
                }
            }
            Op::EmbedRow { table, row } => {
                let shape = val!(table).shape().to_vec();
                let m = shape[1];
                let mut gt = vec![S::zero(); shape[0] * m];
                gt[row * m..(row + 1) * m].copy_from_slice(g.data());
                contribs.push((*table, Tensor::new(shape, gt).expect("shape")));
            }
            Op::Conv3d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (input, kernel) = (*input, *kernel);
                let (stride, padding) = (*stride, *padding);
                if self.nodes[input.0].requires_grad {
                    contribs.push((
                        input,
                        conv::conv3d_grad_input(g, val!(kernel), val!(input).shape(), stride, padding),
                    ));
                }
                if self.nodes[kernel.0].requires_grad {
                    contribs.push((
                        kernel,
                        conv::conv3d_grad_kernel(g, val!(input), val!(kernel).shape(), stride, padding),
                    ));
                }
            }
            Op::ConvTranspose3d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (input, kernel) = (*input, *kernel);
                let (stride, padding) = (*stride, *padding);
                if self.nodes[input.0].requires_grad {
                    contribs.push((
                        input,
                        conv::conv_transpose3d_grad_input(
                            g,
                            val!(kernel),
                            val!(input).shape(),
                            stride,
                            padding,
                        ),
                    ));
                }
                if self.nodes[kernel.0].requires_grad {
                    contribs.push((
                        kernel,
                        conv::conv_transpose3d_grad_kernel(
                            g,
                            val!(input),
                            val!(kernel).shape(),
                            stride,
                            padding,
                        ),
                    ));
                }
            }
            Op::Trilinear(x) => {
                contribs.push((*x, interp::trilinear_grad_input(g, val!(x).shape())));
            }
            Op::Patchify { x, patch } => {
                let s = val!(x).shape();
                let grid =
                    patch::patch_grid([s[1], s[2], s[3]], *patch).expect("validated at forward");
                contribs.push((
                    *x,
                    patch::unpatchify(g, *patch, grid, s[0]).expect("validated at forward"),
                ));
            }
            Op::Unpatchify { x, patch, .. } => {
                contribs.push((*x, patch::patchify(g, *patch).expect("validated at forward")));
            }
        }
        for (id, contrib) in contribs {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            match &mut self.grads[id.0] {
                Some(acc) => {
                    let ad = acc.data_mut();
                    for (a, c) in ad.iter_mut().zip(contrib.data()) {
                        *a = *a + *c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        }
    }
}

// ── shared numeric kernels ─────────────────────────────────────────

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn norm<S: Scalar>(v: &[S]) -> S {
    let mut acc = S::zero();
    for &x in v {
        acc = acc + x * x;
    }
    acc.sqrt()
}

fn rms<S: Scalar>(row: &[S], eps: f64) -> S {
    let mut acc = S::zero();
    for &x in row {
        acc = acc + x * x;
    }
    (acc / S::from_f64(row.len() as f64) + S::from_f64(eps)).sqrt()
}

pub(crate) fn cosine_kernel<S: Scalar>(a: &[S], b: &[S], eps: f64) -> S {
    let eps_s = S::from_f64(eps);
    let mut dot = S::zero();
    for j in 0..a.len() {
        dot = dot + a[j] * b[j];
    }
    dot / (norm(a).max(eps_s) * norm(b).max(eps_s))
}

pub(crate) fn matmul_kernel<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = ad[i * k + l];
            let b_row = &bd[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_il * b_row[j];
            }
        }
    }
    Tensor::new(vec![m, n], c).expect("shape")
}

/// `a @ b^T` for `a: [m, n]`, `b: [k, n]` -> `[m, k]`.
fn matmul_nt_kernel<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[0];
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        let a_row = &ad[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &bd[l * n..(l + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc = acc + a_row[j] * b_row[j];
            }
            c[i * k + l] = acc;
        }
    }
    Tensor::new(vec![m, k], c).expect("shape")
}

/// `a^T @ b` for `a: [m, k]`, `b: [m, n]` -> `[k, n]`.
fn matmul_tn_kernel<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let b_row = &bd[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = ad[i * k + l];
            let c_row = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_il * b_row[j];
            }
        }
    }
    Tensor::new(vec![k, n], c).expect("shape")
}

fn transpose_kernel<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    Tensor::from_fn(&[m, n], |i| {
        let (r, c) = (i / n, i % n);
        d[c * m + r]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mean_of_squares_gradient_closed_form() {
        // loss = mean(x^2), x = (1,2,3) -> grad = (2/3, 4/3, 2)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.square(x);
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!((g[2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn repeated_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::BackwardTwice)
        ));
    }

    #[test]
    fn grad_accumulates_once_per_use_site() {
        // loss = sum(x + x): every element feeds the loss twice
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[3], |i| i as f64), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_subgraphs_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn silu_closed_form_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), false);
        let y = tape.silu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn relu_negative_clamps_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cosine_pair_basics() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![2], vec![2.0, 1.0]).unwrap(), false);
        let c = tape.cosine_pair(a, b, 1e-8).unwrap();
        assert!((tape.value(c).data()[0] - 0.8).abs() < 1e-15);

        let same = tape.cosine_pair(a, a, 1e-8).unwrap();
        assert!((tape.value(same).data()[0] - 1.0).abs() < 1e-12);

        let e1 = tape.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), false);
        let e2 = tape.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), false);
        let ortho = tape.cosine_pair(e1, e2, 1e-8).unwrap();
        assert_eq!(tape.value(ortho).data()[0], 0.0);
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let b = tape.leaf(
            Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
            true,
        );
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn blocked_row_sum_reduction_is_block_size_invariant() {
        // Per-row sums folded in row order: any row-blocking yields the same
        // bits, because row-internal folds and the final fold never change.
        let x = Tensor::<f32>::from_fn(&[7, 5], |i| ((i * 31 % 17) as f32) * 0.37 - 0.2);
        let run = |block: usize| -> u32 {
            let mut tape = Tape::<f32>::new();
            let id = tape.constant(x.clone());
            let mut parts = Vec::new();
            let mut r = 0;
            while r < 7 {
                let hi = (r + block).min(7);
                let sl = tape.slice_rows(id, r, hi).unwrap();
                parts.push(tape.sum_rows(sl).unwrap());
                r = hi;
            }
            let s = tape.sum_elems(&parts).unwrap();
            tape.value(s).data()[0].to_bits()
        };
        let reference = run(7);
        for block in [1usize, 2, 3, 4, 6] {
            assert_eq!(run(block), reference, "block size {block}");
        }
    }
}
