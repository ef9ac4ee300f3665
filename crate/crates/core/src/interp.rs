//! Trilinear resizing with the align-corners convention, which makes the
//! identity case (target dims == source dims) an exact passthrough.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-output-sample interpolation taps along one axis: indices of the two
/// source samples and the weight of the second one.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = if n_out > 1 {
        (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    } else {
        0.0
    };
    (0..n_out)
        .map(|i| {
            let pos = scale * i as f64;
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn check(input: &Tensor<impl Scalar>, target: [usize; 3]) -> Result<()> {
    if input.shape().len() != 5 {
        return Err(TensorError::Invalid {
            op: "trilinear",
            msg: format!("input must have rank 5, got shape {:?}", input.shape()),
        });
    }
    if target.iter().any(|&d| d == 0) {
        return Err(TensorError::Invalid {
            op: "trilinear",
            msg: format!("target dims must be positive, got {target:?}"),
        });
    }
    Ok(())
}

/// Resize `[B, C, T, H, W]` to `[B, C, T', H', W']`.
pub fn trilinear<S: Scalar>(input: &Tensor<S>, target: [usize; 3]) -> Result<Tensor<S>> {
    check(input, target)?;
    let [b_n, c_n, t_in, h_in, w_in] = crate::conv::dims5(input);
    let [t_out, h_out, w_out] = target;
    if [t_in, h_in, w_in] == target {
        return Ok(input.clone());
    }

    let tt = axis_taps(t_in, t_out);
    let th = axis_taps(h_in, h_out);
    let tw = axis_taps(w_in, w_out);
    let x = input.data();
    let mut out = vec![S::zero(); b_n * c_n * t_out * h_out * w_out];

    let in_hw = h_in * w_in;
    let plane = t_in * in_hw;
    let mut o = 0usize;
    for bc in 0..b_n * c_n {
        let x_p = &x[bc * plane..(bc + 1) * plane];
        for &(t0, t1, wt) in &tt {
            for &(h0, h1, wh) in &th {
                for &(w0, w1, ww) in &tw {
                    let sample = |ti: usize, hi: usize, wi: usize| -> f64 {
                        x_p[ti * in_hw + hi * w_in + wi].to_f64()
                    };
                    let c00 = sample(t0, h0, w0) * (1.0 - ww) + sample(t0, h0, w1) * ww;
                    let c01 = sample(t0, h1, w0) * (1.0 - ww) + sample(t0, h1, w1) * ww;
                    let c10 = sample(t1, h0, w0) * (1.0 - ww) + sample(t1, h0, w1) * ww;
                    let c11 = sample(t1, h1, w0) * (1.0 - ww) + sample(t1, h1, w1) * ww;
                    let c0 = c00 * (1.0 - wh) + c01 * wh;
                    let c1 = c10 * (1.0 - wh) + c11 * wh;
                    out[o] = S::from_f64(c0 * (1.0 - wt) + c1 * wt);
                    o += 1;
                }
            }
        }
    }
    Tensor::new(vec![b_n, c_n, t_out, h_out, w_out], out)
}

/// Gradient of `trilinear` with respect to its input: scatter the output
/// cotangent through the same taps.
pub fn trilinear_grad_input<S: Scalar>(
    grad_out: &Tensor<S>,
    input_shape: &[usize],
) -> Tensor<S> {
    let [b_n, c_n, t_out, h_out, w_out] = crate::conv::dims5(grad_out);
    let (t_in, h_in, w_in) = (input_shape[2], input_shape[3], input_shape[4]);
    if [t_in, h_in, w_in] == [t_out, h_out, w_out] {
        return grad_out.clone();
    }

    let tt = axis_taps(t_in, t_out);
    let th = axis_taps(h_in, h_out);
    let tw = axis_taps(w_in, w_out);
    let g = grad_out.data();
    let mut gx = vec![S::zero(); input_shape.iter().product()];

    let in_hw = h_in * w_in;
    let plane = t_in * in_hw;
    let mut o = 0usize;
    for bc in 0..b_n * c_n {
        let gx_p = &mut gx[bc * plane..(bc + 1) * plane];
        for &(t0, t1, wt) in &tt {
            for &(h0, h1, wh) in &th {
                for &(w0, w1, ww) in &tw {
                    let go = g[o].to_f64();
                    o += 1;
                    let mut put = |ti: usize, hi: usize, wi: usize, w: f64| {
                        let idx = ti * in_hw + hi * w_in + wi;
                        gx_p[idx] = gx_p[idx] + S::from_f64(go * w);
                    };
                    put(t0, h0, w0, (1.0 - wt) * (1.0 - wh) * (1.0 - ww));
                    put(t0, h0, w1, (1.0 - wt) * (1.0 - wh) * ww);
                    put(t0, h1, w0, (1.0 - wt) * wh * (1.0 - ww));
                    put(t0, h1, w1, (1.0 - wt) * wh * ww);
                    put(t1, h0, w0, wt * (1.0 - wh) * (1.0 - ww));
                    put(t1, h0, w1, wt * (1.0 - wh) * ww);
                    put(t1, h1, w0, wt * wh * (1.0 - ww));
                    put(t1, h1, w1, wt * wh * ww);
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("validated shape")
}
