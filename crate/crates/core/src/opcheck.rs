//! Registry of finite-difference checks covering every differentiable tape
//! operation, each exercised on several randomized shapes. Inputs for kinked
//! functions (relu, abs) are sampled away from the kink, matching the
//! documented subgradient-at-zero convention.

use crate::gradcheck::finite_diff_check;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Deterministic generator for check inputs; no external RNG so the suite is
/// reproducible from its literal seeds.
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() as usize) % (hi - lo + 1)
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.uniform())
    }

    /// Uniform in [-1, 1) excluding (-margin, margin); for kinked ops.
    pub fn tensor_off_kink(&mut self, shape: &[usize], margin: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let v = self.uniform();
            let mag = v.abs() * (1.0 - margin) + margin;
            if v >= 0.0 {
                mag
            } else {
                -mag
            }
        })
    }
}

const RUNS: usize = 5;
const EPS: f64 = 1e-8;

fn run_case<G>(
    out: &mut Vec<OpCheck>,
    name: &str,
    tol: f64,
    h: f64,
    mut gen: G,
) where
    G: FnMut(
        &mut SplitMix64,
    ) -> (
        Tensor<f64>,
        Box<dyn Fn(&mut Tape<f64>, TensorId) -> crate::Result<TensorId>>,
    ),
{
    let mut rng = SplitMix64::new(0xC0FFEE ^ name.len() as u64 ^ hash_name(name));
    let mut worst = 0.0f64;
    let mut pass = true;
    for _ in 0..RUNS {
        let (x, f) = gen(&mut rng);
        match finite_diff_check(|t, id| f(t, id), &x, h, tol) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                pass &= r.pass;
            }
            Err(e) => panic!("{name}: check construction failed: {e}"),
        }
    }
    out.push(OpCheck {
        name: name.to_string(),
        max_rel_err: worst,
        pass,
    });
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Run the per-operation gradient checks. Each operation is evaluated on
/// `RUNS` randomized shapes; the reported error is the worst across runs.
pub fn op_suite(tol: f64, h: f64) -> Vec<OpCheck> {
    let mut out = Vec::new();

    run_case(&mut out, "add", tol, h, |rng| {
        let n = rng.range(2, 5);
        let m = rng.range(2, 5);
        let c = rng.tensor(&[n, m]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let cc = t.constant(c.clone());
            let y = t.add(id, cc)?;
            Ok(t.mean(y))
        }))
    });

    run_case(&mut out, "sub", tol, h, |rng| {
        let n = rng.range(2, 6);
        let c = rng.tensor(&[n]);
        (rng.tensor(&[n]), Box::new(move |t, id| {
            let cc = t.constant(c.clone());
            let y = t.sub(cc, id)?;
            Ok(t.mean(y))
        }))
    });

    run_case(&mut out, "mul", tol, h, |rng| {
        let n = rng.range(2, 4);
        let m = rng.range(2, 4);
        let c = rng.tensor(&[n, m]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let cc = t.constant(c.clone());
            let y = t.mul(id, cc)?;
            Ok(t.sum(y))
        }))
    });

    run_case(&mut out, "scale", tol, h, |rng| {
        let n = rng.range(2, 8);
        (rng.tensor(&[n]), Box::new(|t, id| {
            let y = t.scale(id, -0.7);
            Ok(t.sum(y))
        }))
    });

    run_case(&mut out, "abs", tol, h, |rng| {
        let n = rng.range(3, 9);
        (rng.tensor_off_kink(&[n], 0.05), Box::new(|t, id| {
            let y = t.abs(id);
            Ok(t.mean(y))
        }))
    });

    run_case(&mut out, "square", tol, h, |rng| {
        let n = rng.range(3, 9);
        (rng.tensor(&[n]), Box::new(|t, id| {
            let y = t.square(id);
            Ok(t.mean(y))
        }))
    });

    run_case(&mut out, "relu", tol, h, |rng| {
        let n = rng.range(3, 9);
        (rng.tensor_off_kink(&[n], 0.05), Box::new(|t, id| {
            let y = t.relu(id);
            Ok(t.sum(y))
        }))
    });

    run_case(&mut out, "silu", tol, h, |rng| {
        let n = rng.range(3, 9);
        (rng.tensor(&[n]), Box::new(|t, id| {
            let y = t.silu(id);
            Ok(t.mean(y))
        }))
    });

    run_case(&mut out, "sum_rows", tol, h, |rng| {
        let n = rng.range(2, 5);
        let m = rng.range(2, 5);
        let c = rng.tensor(&[n]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let rows = t.sum_rows(id)?;
            let cc = t.constant(c.clone());
            let y = t.mul(rows, cc)?;
            Ok(t.sum(y))
        }))
    });

    run_case(&mut out, "mean", tol, h, |rng| {
        let n = rng.range(2, 5);
        let m = rng.range(2, 5);
        (rng.tensor(&[n, m]), Box::new(|t, id| Ok(t.mean(id))))
    });

    run_case(&mut out, "sum_elems", tol, h, |rng| {
        let n = rng.range(2, 5);
        (rng.tensor(&[n, 3]), Box::new(|t, id| {
            let a = t.slice_rows(id, 0, 1)?;
            let b = t.slice_rows(id, 1, t.value(id).shape()[0])?;
            t.sum_elems(&[a, b])
        }))
    });

    run_case(&mut out, "matmul_lhs", tol, h, |rng| {
        let (m, k, n) = (rng.range(2, 4), rng.range(2, 4), rng.range(2, 4));
        let b = rng.tensor(&[k, n]);
        let w = rng.tensor(&[m, n]);
        (rng.tensor(&[m, k]), Box::new(move |t, id| {
            let bc = t.constant(b.clone());
            let y = t.matmul(id, bc)?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "matmul_rhs", tol, h, |rng| {
        let (m, k, n) = (rng.range(2, 4), rng.range(2, 4), rng.range(2, 4));
        let a = rng.tensor(&[m, k]);
        let w = rng.tensor(&[m, n]);
        (rng.tensor(&[k, n]), Box::new(move |t, id| {
            let ac = t.constant(a.clone());
            let y = t.matmul(ac, id)?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "transpose2", tol, h, |rng| {
        let (n, m) = (rng.range(2, 5), rng.range(2, 5));
        let w = rng.tensor(&[m, n]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let y = t.transpose2(id)?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "softmax_rows", tol, h, |rng| {
        let (n, m) = (rng.range(2, 4), rng.range(2, 5));
        let w = rng.tensor(&[n, m]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let y = t.softmax_rows(id)?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "rms_norm_rows", tol, h, |rng| {
        let (n, m) = (rng.range(2, 4), rng.range(2, 5));
        let w = rng.tensor(&[n, m]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let y = t.rms_norm_rows(id, 1e-6)?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "row_normalize", tol, h, |rng| {
        let (n, m) = (rng.range(2, 4), rng.range(2, 5));
        let w = rng.tensor(&[n, m]);
        (rng.tensor_off_kink(&[n, m], 0.1), Box::new(move |t, id| {
            let y = t.row_normalize(id, EPS)?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "cosine_pair_lhs", tol, h, |rng| {
        let n = rng.range(2, 6);
        let b = rng.tensor_off_kink(&[n], 0.2);
        (rng.tensor_off_kink(&[n], 0.2), Box::new(move |t, id| {
            let bc = t.constant(b.clone());
            t.cosine_pair(id, bc, EPS)
        }))
    });

    run_case(&mut out, "cosine_pair_rhs", tol, h, |rng| {
        let n = rng.range(2, 6);
        let a = rng.tensor_off_kink(&[n], 0.2);
        (rng.tensor_off_kink(&[n], 0.2), Box::new(move |t, id| {
            let ac = t.constant(a.clone());
            t.cosine_pair(ac, id, EPS)
        }))
    });

    run_case(&mut out, "slice_rows", tol, h, |rng| {
        let (n, m) = (rng.range(3, 6), rng.range(2, 4));
        (rng.tensor(&[n, m]), Box::new(|t, id| {
            let n = t.value(id).shape()[0];
            let y = t.slice_rows(id, 1, n - 1)?;
            Ok(t.mean(y))
        }))
    });

    run_case(&mut out, "reshape", tol, h, |rng| {
        let (n, m) = (rng.range(2, 4), rng.range(2, 4));
        let w = rng.tensor(&[n * m]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let nm = t.value(id).numel();
            let y = t.reshape(id, vec![nm])?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "permute", tol, h, |rng| {
        let (a, b, c) = (rng.range(2, 3), rng.range(2, 3), rng.range(2, 3));
        let w = rng.tensor(&[c, a, b]);
        (rng.tensor(&[a, b, c]), Box::new(move |t, id| {
            let y = t.permute(id, &[2, 0, 1])?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "bias_add_cols_input", tol, h, |rng| {
        let (n, m) = (rng.range(2, 4), rng.range(2, 4));
        let b = rng.tensor(&[m]);
        (rng.tensor(&[n, m]), Box::new(move |t, id| {
            let bc = t.constant(b.clone());
            let y = t.bias_add_cols(id, bc)?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "bias_add_cols_bias", tol, h, |rng| {
        let (n, m) = (rng.range(2, 4), rng.range(2, 4));
        let x = rng.tensor(&[n, m]);
        (rng.tensor(&[m]), Box::new(move |t, id| {
            let xc = t.constant(x.clone());
            let y = t.bias_add_cols(xc, id)?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "bias_add_chan_bias", tol, h, |rng| {
        let c = rng.range(2, 3);
        let x = rng.tensor(&[1, c, 2, 2, 2]);
        (rng.tensor(&[c]), Box::new(move |t, id| {
            let xc = t.constant(x.clone());
            let y = t.bias_add_chan(xc, id)?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "embed_row", tol, h, |rng| {
        let (v, d) = (rng.range(2, 5), rng.range(2, 4));
        let row = rng.range(0, v - 1);
        let w = rng.tensor(&[1, d]);
        (rng.tensor(&[v, d]), Box::new(move |t, id| {
            let y = t.embed_row(id, row)?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        }))
    });

    run_case(&mut out, "conv3d_input", tol, h, |rng| {
        let (ci, co) = (rng.range(1, 3), rng.range(1, 3));
        let (ti, hi, wi) = (rng.range(2, 4), rng.range(3, 5), rng.range(3, 5));
        let (kt, kh, kw) = (rng.range(1, 2), rng.range(1, 3), rng.range(1, 3));
        let stride = [1, rng.range(1, 2), rng.range(1, 2)];
        let k = rng.tensor(&[co, ci, kt, kh, kw]);
        (rng.tensor(&[1, ci, ti, hi, wi]), Box::new(move |t, id| {
            let kc = t.constant(k.clone());
            let y = t.conv3d(id, kc, stride, [0, 1, 1])?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "conv3d_kernel", tol, h, |rng| {
        let (ci, co) = (rng.range(1, 3), rng.range(1, 3));
        let (ti, hi, wi) = (rng.range(3, 4), rng.range(3, 5), rng.range(3, 5));
        let (kt, kh, kw) = (rng.range(1, 3), rng.range(1, 3), rng.range(1, 2));
        let x = rng.tensor(&[1, ci, ti, hi, wi]);
        (rng.tensor(&[co, ci, kt, kh, kw]), Box::new(move |t, id| {
            let xc = t.constant(x.clone());
            let y = t.conv3d(xc, id, [1, 1, 2], [1, 0, 0])?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "conv_transpose3d_input", tol, h, |rng| {
        let (ci, co) = (rng.range(1, 3), rng.range(1, 3));
        let (ti, hi, wi) = (rng.range(2, 3), rng.range(2, 4), rng.range(2, 4));
        let (kh, kw) = (rng.range(3, 4), rng.range(3, 4));
        let k = rng.tensor(&[ci, co, 1, kh, kw]);
        (rng.tensor(&[1, ci, ti, hi, wi]), Box::new(move |t, id| {
            let kc = t.constant(k.clone());
            let y = t.conv_transpose3d(id, kc, [1, 2, 2], [0, 1, 1])?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "conv_transpose3d_kernel", tol, h, |rng| {
        let (ci, co) = (rng.range(1, 3), rng.range(1, 3));
        let (ti, hi, wi) = (rng.range(2, 3), rng.range(2, 4), rng.range(2, 4));
        let x = rng.tensor(&[1, ci, ti, hi, wi]);
        (rng.tensor(&[ci, co, 1, 3, 3]), Box::new(move |t, id| {
            let xc = t.constant(x.clone());
            let y = t.conv_transpose3d(xc, id, [1, 2, 2], [0, 1, 1])?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "trilinear_up", tol, h, |rng| {
        let (ti, hi, wi) = (rng.range(2, 3), rng.range(2, 4), rng.range(2, 4));
        let target = [ti * 2, hi + rng.range(1, 3), wi * 2];
        (rng.tensor(&[1, 2, ti, hi, wi]), Box::new(move |t, id| {
            let y = t.trilinear(id, target)?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "trilinear_down", tol, h, |rng| {
        let (ti, hi, wi) = (rng.range(3, 5), rng.range(4, 6), rng.range(4, 6));
        let target = [ti - 1, hi - 2, wi - rng.range(1, 2)];
        (rng.tensor(&[1, 2, ti, hi, wi]), Box::new(move |t, id| {
            let y = t.trilinear(id, target)?;
            let z = t.square(y);
            Ok(t.mean(z))
        }))
    });

    run_case(&mut out, "patchify", tol, h, |rng| {
        let (c, gt, gh, gw) = (
            rng.range(1, 2),
            rng.range(1, 2),
            rng.range(1, 3),
            rng.range(1, 2),
        );
        let patch = [rng.range(1, 2), 2, rng.range(1, 2)];
        let w = rng.tensor(&[gt * gh * gw, c * patch[0] * patch[1] * patch[2]]);
        (
            rng.tensor(&[c, gt * patch[0], gh * patch[1], gw * patch[2]]),
            Box::new(move |t, id| {
                let y = t.patchify(id, patch)?;
                let wc = t.constant(w.clone());
                let z = t.mul(y, wc)?;
                Ok(t.sum(z))
            }),
        )
    });

    run_case(&mut out, "unpatchify", tol, h, |rng| {
        let (c, gt, gh, gw) = (rng.range(1, 2), rng.range(1, 2), 2, rng.range(1, 2));
        let patch = [1, rng.range(1, 2), 2];
        let w = rng.tensor(&[c, gt * patch[0], gh * patch[1], gw * patch[2]]);
        (
            rng.tensor(&[gt * gh * gw, c * patch[0] * patch[1] * patch[2]]),
            Box::new(move |t, id| {
                let y = t.unpatchify(id, patch, [gt, gh, gw], c)?;
                let wc = t.constant(w.clone());
                let z = t.mul(y, wc)?;
                Ok(t.sum(z))
            }),
        )
    });

    out
}
