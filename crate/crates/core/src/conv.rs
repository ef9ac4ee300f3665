//! Dense 3D convolution and transposed convolution kernels.
//!
//! Layouts: convolution input `[B, C_in, T, H, W]`, kernel
//! `[C_out, C_in, kT, kH, kW]`. Transposed convolution input
//! `[B, C_in, T, H, W]`, kernel `[C_in, C_out, kT, kH, kW]`, so that
//! `conv_transpose3d(g, k)` applied to a cotangent `g` of `conv3d(x, k)`
//! reproduces the gradient of `conv3d` with respect to `x`.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn mismatch(op: &'static str, axis: &'static str, msg: String) -> TensorError {
    TensorError::ShapeMismatch { op, axis, msg }
}

fn check_rank5(op: &'static str, name: &'static str, t: &Tensor<impl Scalar>) -> Result<()> {
    if t.shape().len() != 5 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("{name} must have rank 5, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn check_stride(op: &'static str, stride: [usize; 3]) -> Result<()> {
    if stride.iter().any(|&s| s == 0) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("stride components must be >= 1, got {stride:?}"),
        });
    }
    Ok(())
}

/// Output spatial dims for `conv3d` under the standard size formula
/// `(in + 2*pad - k) / stride + 1`.
pub fn conv3d_out_dims(
    in_dims: [usize; 3],
    k_dims: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    const AXES: [&str; 3] = ["t", "h", "w"];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let padded = in_dims[a] + 2 * padding[a];
        if k_dims[a] == 0 {
            return Err(mismatch("conv3d", AXES[a], "kernel extent is zero".into()));
        }
        if k_dims[a] > padded {
            return Err(mismatch(
                "conv3d",
                AXES[a],
                format!(
                    "kernel extent {} exceeds padded input extent {}",
                    k_dims[a], padded
                ),
            ));
        }
        out[a] = (padded - k_dims[a]) / stride[a] + 1;
    }
    Ok(out)
}

/// Output dims for `conv_transpose3d`: `(in - 1) * stride - 2*pad + k`.
pub fn conv_transpose3d_out_dims(
    in_dims: [usize; 3],
    k_dims: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    const AXES: [&str; 3] = ["t", "h", "w"];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let grown = (in_dims[a] - 1) * stride[a] + k_dims[a];
        if k_dims[a] == 0 || grown <= 2 * padding[a] {
            return Err(mismatch(
                "conv_transpose3d",
                AXES[a],
                format!(
                    "kernel {} / stride {} / padding {} yield a non-positive output extent",
                    k_dims[a], stride[a], padding[a]
                ),
            ));
        }
        out[a] = grown - 2 * padding[a];
    }
    Ok(out)
}

pub fn conv3d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<S>> {
    check_rank5("conv3d", "input", input)?;
    check_rank5("conv3d", "kernel", kernel)?;
    check_stride("conv3d", stride)?;
    let [b_n, c_in, t_in, h_in, w_in] = dims5(input);
    let [c_out, kc_in, k_t, k_h, k_w] = dims5(kernel);
    if kc_in != c_in {
        return Err(mismatch(
            "conv3d",
            "c_in",
            format!("input has {c_in} channels, kernel expects {kc_in}"),
        ));
    }
    let [t_out, h_out, w_out] =
        conv3d_out_dims([t_in, h_in, w_in], [k_t, k_h, k_w], stride, padding)?;

    let x = input.data();
    let k = kernel.data();
    let mut out = vec![S::zero(); b_n * c_out * t_out * h_out * w_out];

    let in_hw = h_in * w_in;
    let in_chw = c_in * t_in * in_hw;
    let ker_hw = k_h * k_w;
    let ker_chw = c_in * k_t * ker_hw;

    let mut o = 0usize;
    for b in 0..b_n {
        let x_b = &x[b * in_chw..(b + 1) * in_chw];
        for co in 0..c_out {
            let k_co = &k[co * ker_chw..(co + 1) * ker_chw];
            for ot in 0..t_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = S::zero();
                        for ci in 0..c_in {
                            for kt in 0..k_t {
                                let it = (ot * stride[0] + kt).wrapping_sub(padding[0]);
                                if it >= t_in {
                                    continue;
                                }
                                for kh in 0..k_h {
                                    let ih = (oh * stride[1] + kh).wrapping_sub(padding[1]);
                                    if ih >= h_in {
                                        continue;
                                    }
                                    let x_row = ci * t_in * in_hw + it * in_hw + ih * w_in;
                                    let k_row = ci * k_t * ker_hw + kt * ker_hw + kh * k_w;
                                    for kw in 0..k_w {
                                        let iw = (ow * stride[2] + kw).wrapping_sub(padding[2]);
                                        if iw >= w_in {
                                            continue;
                                        }
                                        acc = acc + x_b[x_row + iw] * k_co[k_row + kw];
                                    }
                                }
                            }
                        }
                        out[o] = acc;
                        o += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b_n, c_out, t_out, h_out, w_out], out)
}

/// Gradient of `conv3d` with respect to its input.
pub fn conv3d_grad_input<S: Scalar>(
    grad_out: &Tensor<S>,
    kernel: &Tensor<S>,
    input_shape: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Tensor<S> {
    let [b_n, c_out, t_out, h_out, w_out] = dims5(grad_out);
    let [_, c_in, t_in, h_in, w_in] = [
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    ];
    let [_, _, k_t, k_h, k_w] = dims5(kernel);
    let g = grad_out.data();
    let k = kernel.data();
    let mut gx = vec![S::zero(); input_shape.iter().product()];

    let in_hw = h_in * w_in;
    let in_chw = c_in * t_in * in_hw;
    let ker_hw = k_h * k_w;
    let ker_chw = c_in * k_t * ker_hw;

    let mut o = 0usize;
    for b in 0..b_n {
        let gx_b = &mut gx[b * in_chw..(b + 1) * in_chw];
        for co in 0..c_out {
            let k_co = &k[co * ker_chw..(co + 1) * ker_chw];
            for ot in 0..t_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let go = g[o];
                        o += 1;
                        for ci in 0..c_in {
                            for kt in 0..k_t {
                                let it = (ot * stride[0] + kt).wrapping_sub(padding[0]);
                                if it >= t_in {
                                    continue;
                                }
                                for kh in 0..k_h {
                                    let ih = (oh * stride[1] + kh).wrapping_sub(padding[1]);
                                    if ih >= h_in {
                                        continue;
                                    }
                                    let x_row = ci * t_in * in_hw + it * in_hw + ih * w_in;
                                    let k_row = ci * k_t * ker_hw + kt * ker_hw + kh * k_w;
                                    for kw in 0..k_w {
                                        let iw = (ow * stride[2] + kw).wrapping_sub(padding[2]);
                                        if iw >= w_in {
                                            continue;
                                        }
                                        gx_b[x_row + iw] = gx_b[x_row + iw] + go * k_co[k_row + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("validated shape")
}

/// Gradient of `conv3d` with respect to its kernel.
pub fn conv3d_grad_kernel<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    kernel_shape: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Tensor<S> {
    let [b_n, c_out, t_out, h_out, w_out] = dims5(grad_out);
    let [_, c_in, t_in, h_in, w_in] = dims5(input);
    let (k_t, k_h, k_w) = (kernel_shape[2], kernel_shape[3], kernel_shape[4]);
    let g = grad_out.data();
    let x = input.data();
    let mut gk = vec![S::zero(); kernel_shape.iter().product()];

    let in_hw = h_in * w_in;
    let in_chw = c_in * t_in * in_hw;
    let ker_hw = k_h * k_w;
    let ker_chw = c_in * k_t * ker_hw;

    let mut o = 0usize;
    for b in 0..b_n {
        let x_b = &x[b * in_chw..(b + 1) * in_chw];
        for co in 0..c_out {
            let gk_co = &mut gk[co * ker_chw..(co + 1) * ker_chw];
            for ot in 0..t_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let go = g[o];
                        o += 1;
                        for ci in 0..c_in {
                            for kt in 0..k_t {
                                let it = (ot * stride[0] + kt).wrapping_sub(padding[0]);
                                if it >= t_in {
                                    continue;
                                }
                                for kh in 0..k_h {
                                    let ih = (oh * stride[1] + kh).wrapping_sub(padding[1]);
                                    if ih >= h_in {
                                        continue;
                                    }
                                    let x_row = ci * t_in * in_hw + it * in_hw + ih * w_in;
                                    let k_row = ci * k_t * ker_hw + kt * ker_hw + kh * k_w;
                                    for kw in 0..k_w {
                                        let iw = (ow * stride[2] + kw).wrapping_sub(padding[2]);
                                        if iw >= w_in {
                                            continue;
                                        }
                                        gk_co[k_row + kw] = gk_co[k_row + kw] + go * x_b[x_row + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), gk).expect("validated shape")
}

pub fn conv_transpose3d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<S>> {
    check_rank5("conv_transpose3d", "input", input)?;
    check_rank5("conv_transpose3d", "kernel", kernel)?;
    check_stride("conv_transpose3d", stride)?;
    let [b_n, c_in, t_in, h_in, w_in] = dims5(input);
    let [kc_in, c_out, k_t, k_h, k_w] = dims5(kernel);
    if kc_in != c_in {
        return Err(mismatch(
            "conv_transpose3d",
            "c_in",
            format!("input has {c_in} channels, kernel expects {kc_in}"),
        ));
    }
    let [t_out, h_out, w_out] =
        conv_transpose3d_out_dims([t_in, h_in, w_in], [k_t, k_h, k_w], stride, padding)?;

    let x = input.data();
    let k = kernel.data();
    let mut out = vec![S::zero(); b_n * c_out * t_out * h_out * w_out];

    let out_hw = h_out * w_out;
    let out_chw = c_out * t_out * out_hw;
    let ker_hw = k_h * k_w;
    let ker_ohw = c_out * k_t * ker_hw;

    let mut i = 0usize;
    for b in 0..b_n {
        let out_b = &mut out[b * out_chw..(b + 1) * out_chw];
        for ci in 0..c_in {
            let k_ci = &k[ci * ker_ohw..(ci + 1) * ker_ohw];
            for it in 0..t_in {
                for ih in 0..h_in {
                    for iw in 0..w_in {
                        let v = x[i];
                        i += 1;
                        for co in 0..c_out {
                            for kt in 0..k_t {
                                let ot = (it * stride[0] + kt).wrapping_sub(padding[0]);
                                if ot >= t_out {
                                    continue;
                                }
                                for kh in 0..k_h {
                                    let oh = (ih * stride[1] + kh).wrapping_sub(padding[1]);
                                    if oh >= h_out {
                                        continue;
                                    }
                                    let o_row = co * t_out * out_hw + ot * out_hw + oh * w_out;
                                    let k_row = co * k_t * ker_hw + kt * ker_hw + kh * k_w;
                                    for kw in 0..k_w {
                                        let ow = (iw * stride[2] + kw).wrapping_sub(padding[2]);
                                        if ow >= w_out {
                                            continue;
                                        }
                                        out_b[o_row + ow] =
                                            out_b[o_row + ow] + v * k_ci[k_row + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b_n, c_out, t_out, h_out, w_out], out)
}

/// Gradient of `conv_transpose3d` with respect to its input: a gather over
/// the taps that each input element scattered to.
pub fn conv_transpose3d_grad_input<S: Scalar>(
    grad_out: &Tensor<S>,
    kernel: &Tensor<S>,
    input_shape: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Tensor<S> {
    let [b_n, _, t_out, h_out, w_out] = dims5(grad_out);
    let (c_in, t_in, h_in, w_in) = (
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let [_, c_out, k_t, k_h, k_w] = dims5(kernel);
    let g = grad_out.data();
    let k = kernel.data();
    let mut gx = vec![S::zero(); input_shape.iter().product()];

    let out_hw = h_out * w_out;
    let out_chw = c_out * t_out * out_hw;
    let ker_hw = k_h * k_w;
    let ker_ohw = c_out * k_t * ker_hw;

    let mut i = 0usize;
    for b in 0..b_n {
        let g_b = &g[b * out_chw..(b + 1) * out_chw];
        for ci in 0..c_in {
            let k_ci = &k[ci * ker_ohw..(ci + 1) * ker_ohw];
            for it in 0..t_in {
                for ih in 0..h_in {
                    for iw in 0..w_in {
                        let mut acc = S::zero();
                        for co in 0..c_out {
                            for kt in 0..k_t {
                                let ot = (it * stride[0] + kt).wrapping_sub(padding[0]);
                                if ot >= t_out {
                                    continue;
                                }
                                for kh in 0..k_h {
                                    let oh = (ih * stride[1] + kh).wrapping_sub(padding[1]);
                                    if oh >= h_out {
                                        continue;
                                    }
                                    let o_row = co * t_out * out_hw + ot * out_hw + oh * w_out;
                                    let k_row = co * k_t * ker_hw + kt * ker_hw + kh * k_w;
                                    for kw in 0..k_w {
                                        let ow = (iw * stride[2] + kw).wrapping_sub(padding[2]);
                                        if ow >= w_out {
                                            continue;
                                        }
                                        acc = acc + g_b[o_row + ow] * k_ci[k_row + kw];
                                    }
                                }
                            }
                        }
                        gx[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("validated shape")
}

/// Gradient of `conv_transpose3d` with respect to its kernel.
pub fn conv_transpose3d_grad_kernel<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    kernel_shape: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Tensor<S> {
    let [b_n, c_in, t_in, h_in, w_in] = dims5(input);
    let [_, c_out, t_out, h_out, w_out] = dims5(grad_out);
    let (k_t, k_h, k_w) = (kernel_shape[2], kernel_shape[3], kernel_shape[4]);
    let g = grad_out.data();
    let x = input.data();
    let mut gk = vec![S::zero(); kernel_shape.iter().product()];

    let out_hw = h_out * w_out;
    let out_chw = c_out * t_out * out_hw;
    let in_hw = h_in * w_in;
    let in_chw = c_in * t_in * in_hw;
    let ker_hw = k_h * k_w;
    let ker_ohw = c_out * k_t * ker_hw;

    for b in 0..b_n {
        let x_b = &x[b * in_chw..(b + 1) * in_chw];
        let g_b = &g[b * out_chw..(b + 1) * out_chw];
        for ci in 0..c_in {
            let gk_ci = &mut gk[ci * ker_ohw..(ci + 1) * ker_ohw];
            for it in 0..t_in {
                for ih in 0..h_in {
                    for iw in 0..w_in {
                        let v = x_b[ci * t_in * in_hw + it * in_hw + ih * w_in + iw];
                        for co in 0..c_out {
                            for kt in 0..k_t {
                                let ot = (it * stride[0] + kt).wrapping_sub(padding[0]);
                                if ot >= t_out {
                                    continue;
                                }
                                for kh in 0..k_h {
                                    let oh = (ih * stride[1] + kh).wrapping_sub(padding[1]);
                                    if oh >= h_out {
                                        continue;
                                    }
                                    let o_row = co * t_out * out_hw + ot * out_hw + oh * w_out;
                                    let k_row = co * k_t * ker_hw + kt * ker_hw + kh * k_w;
                                    for kw in 0..k_w {
                                        let ow = (iw * stride[2] + kw).wrapping_sub(padding[2]);
                                        if ow >= w_out {
                                            continue;
                                        }
                                        gk_ci[k_row + kw] =
                                            gk_ci[k_row + kw] + v * g_b[o_row + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), gk).expect("validated shape")
}

pub(crate) fn dims5<S: Scalar>(t: &Tensor<S>) -> [usize; 5] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3], s[4]]
}
