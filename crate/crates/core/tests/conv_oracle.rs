//! Brute-force oracles for the convolution family, implemented on different
//! code paths than the library kernels: the conv oracle materializes the
//! zero-padded input first, and the transposed-conv oracle goes through the
//! classical zero-insertion + flipped-kernel convolution route.

use moalign_core::conv::{conv3d, conv_transpose3d};
use moalign_core::tape::Tape;
use moalign_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| a_unit(rng))
}

fn a_unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

/// Seven nested loops over an explicitly materialized zero-padded input.
fn conv3d_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let (b_n, c_in, t_in, h_in, w_in) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let (c_out, _, k_t, k_h, k_w) = (
        k.shape()[0],
        k.shape()[1],
        k.shape()[2],
        k.shape()[3],
        k.shape()[4],
    );
    let (pt, ph, pw) = (t_in + 2 * pad[0], h_in + 2 * pad[1], w_in + 2 * pad[2]);
    let mut padded = Tensor::<f64>::zeros(&[b_n, c_in, pt, ph, pw]);
    {
        let pd = padded.data_mut();
        let phw = ph * pw;
        let ihw = h_in * w_in;
        for b in 0..b_n {
            for c in 0..c_in {
                for t in 0..t_in {
                    for h in 0..h_in {
                        for w in 0..w_in {
                            pd[(((b * c_in + c) * pt + t + pad[0]) * ph + h + pad[1]) * pw
                                + w
                                + pad[2]] = x.at(&[b, c, t, h, w]);
                        }
                    }
                }
                let _ = (phw, ihw);
            }
        }
    }
    let t_out = (pt - k_t) / stride[0] + 1;
    let h_out = (ph - k_h) / stride[1] + 1;
    let w_out = (pw - k_w) / stride[2] + 1;
    Tensor::from_fn(&[b_n, c_out, t_out, h_out, w_out], |flat| {
        let mut rem = flat;
        let ow = rem % w_out;
        rem /= w_out;
        let oh = rem % h_out;
        rem /= h_out;
        let ot = rem % t_out;
        rem /= t_out;
        let co = rem % c_out;
        let b = rem / c_out;
        let mut acc = 0.0;
        for ci in 0..c_in {
            for kt in 0..k_t {
                for kh in 0..k_h {
                    for kw in 0..k_w {
                        acc += padded.at(&[
                            b,
                            ci,
                            ot * stride[0] + kt,
                            oh * stride[1] + kh,
                            ow * stride[2] + kw,
                        ]) * k.at(&[co, ci, kt, kh, kw]);
                    }
                }
            }
        }
        acc
    })
}

/// Transposed convolution through the equivalent route: dilate the input by
/// the stride, pad by `k - 1 - p`, and run a plain convolution against the
/// kernel flipped along t/h/w with its channel axes swapped.
fn conv_transpose3d_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let (b_n, c_in, t_in, h_in, w_in) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let (_, c_out, k_t, k_h, k_w) = (
        k.shape()[0],
        k.shape()[1],
        k.shape()[2],
        k.shape()[3],
        k.shape()[4],
    );
    let dil = [
        (t_in - 1) * stride[0] + 1,
        (h_in - 1) * stride[1] + 1,
        (w_in - 1) * stride[2] + 1,
    ];
    let mut dilated = Tensor::<f64>::zeros(&[b_n, c_in, dil[0], dil[1], dil[2]]);
    for b in 0..b_n {
        for c in 0..c_in {
            for t in 0..t_in {
                for h in 0..h_in {
                    for w in 0..w_in {
                        let idx = [b, c, t * stride[0], h * stride[1], w * stride[2]];
                        let flat = idx[0] * c_in * dil[0] * dil[1] * dil[2]
                            + idx[1] * dil[0] * dil[1] * dil[2]
                            + idx[2] * dil[1] * dil[2]
                            + idx[3] * dil[2]
                            + idx[4];
                        dilated.data_mut()[flat] = x.at(&[b, c, t, h, w]);
                    }
                }
            }
        }
    }
    let flipped = Tensor::from_fn(&[c_out, c_in, k_t, k_h, k_w], |flat| {
        let mut rem = flat;
        let kw = rem % k_w;
        rem /= k_w;
        let kh = rem % k_h;
        rem /= k_h;
        let kt = rem % k_t;
        rem /= k_t;
        let ci = rem % c_in;
        let co = rem / c_in;
        k.at(&[ci, co, k_t - 1 - kt, k_h - 1 - kh, k_w - 1 - kw])
    });
    conv3d_oracle(
        &dilated,
        &flipped,
        [1, 1, 1],
        [k_t - 1 - pad[0], k_h - 1 - pad[1], k_w - 1 - pad[2]],
    )
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv3d_matches_seven_loop_oracle_on_spec_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[1, 2, 4, 5, 5]);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3, 3]);
    let got = conv3d(&x, &k, [1, 1, 1], [0, 0, 0]).unwrap();
    let want = conv3d_oracle(&x, &k, [1, 1, 1], [0, 0, 0]);
    assert!(max_abs_diff(&got, &want) <= 1e-12);
}

#[test]
fn conv3d_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..25 {
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=3);
        let dims = [
            rng.gen_range(1..=3usize),
            rng.gen_range(2..=6),
            rng.gen_range(2..=6),
        ];
        let ks = [
            rng.gen_range(1..=dims[0]),
            rng.gen_range(1..=dims[1]),
            rng.gen_range(1..=dims[2]),
        ];
        let stride = [
            rng.gen_range(1..=2usize),
            rng.gen_range(1..=2),
            rng.gen_range(1..=2),
        ];
        let pad = [
            rng.gen_range(0..=1usize),
            rng.gen_range(0..=1),
            rng.gen_range(0..=1),
        ];
        let b = rng.gen_range(1..=2);
        let x = random_tensor(&mut rng, &[b, ci, dims[0], dims[1], dims[2]]);
        let k = random_tensor(&mut rng, &[co, ci, ks[0], ks[1], ks[2]]);
        let got = conv3d(&x, &k, stride, pad).unwrap();
        let want = conv3d_oracle(&x, &k, stride, pad);
        assert!(
            max_abs_diff(&got, &want) <= 1e-12,
            "case {case}: dims {dims:?} ks {ks:?} stride {stride:?} pad {pad:?}"
        );
    }
}

#[test]
fn conv_transpose3d_matches_dilation_route_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..25 {
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=3);
        let dims = [
            rng.gen_range(1..=3usize),
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
        ];
        let ks = [
            rng.gen_range(1..=2usize),
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
        ];
        let stride = [
            rng.gen_range(1..=2usize),
            rng.gen_range(1..=2),
            rng.gen_range(1..=2),
        ];
        let pad = [0, rng.gen_range(0..=1usize), rng.gen_range(0..=1)];
        // keep padding below kernel extent so the oracle's anti-padding stays valid
        let pad = [
            pad[0].min(ks[0] - 1),
            pad[1].min(ks[1] - 1),
            pad[2].min(ks[2] - 1),
        ];
        let b = rng.gen_range(1..=2);
        let x = random_tensor(&mut rng, &[b, ci, dims[0], dims[1], dims[2]]);
        let k = random_tensor(&mut rng, &[ci, co, ks[0], ks[1], ks[2]]);
        let got = conv_transpose3d(&x, &k, stride, pad).unwrap();
        let want = conv_transpose3d_oracle(&x, &k, stride, pad);
        assert!(
            max_abs_diff(&got, &want) <= 1e-12,
            "case {case}: dims {dims:?} ks {ks:?} stride {stride:?} pad {pad:?}"
        );
    }
}

#[test]
fn conv_transpose_forward_equals_conv_input_gradient() {
    // The adjoint identity behind the layout choice: for y = conv3d(x, k),
    // the reverse-mode input gradient seeded with g equals
    // conv_transpose3d(g, k) whenever the conv tiling is exact.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let ci = rng.gen_range(1..=2);
        let co = rng.gen_range(1..=2);
        let ks = [1, rng.gen_range(2..=3usize), rng.gen_range(2..=3usize)];
        let stride = [1, rng.gen_range(1..=2usize), rng.gen_range(1..=2usize)];
        // choose input dims so (in - k) is divisible by stride (exact tiling)
        let dims = [
            rng.gen_range(1..=2usize),
            ks[1] + stride[1] * rng.gen_range(1..=2usize),
            ks[2] + stride[2] * rng.gen_range(1..=2usize),
        ];
        let x = random_tensor(&mut rng, &[1, ci, dims[0], dims[1], dims[2]]);
        let k = random_tensor(&mut rng, &[co, ci, ks[0], ks[1], ks[2]]);

        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), true);
        let kid = tape.constant(k.clone());
        let y = tape.conv3d(xid, kid, stride, [0, 0, 0]).unwrap();
        // seed the backward pass with a known cotangent via sum(y * g)
        let g = random_tensor(&mut rng, tape.value(y).shape());
        let gid = tape.constant(g.clone());
        let prod = tape.mul(y, gid).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let grad_x = tape.grad(xid).unwrap();

        let direct = conv_transpose3d(&g, &k, stride, [0, 0, 0]).unwrap();
        assert_eq!(direct.shape(), grad_x.shape());
        assert!(max_abs_diff(&direct, grad_x) <= 1e-12);
    }
}

#[test]
fn adjoint_property_of_linear_ops() {
    // <L(x), y> == <x, L^T(y)> for conv, transposed conv and trilinear, with
    // L^T obtained from the backward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    };

    for _ in 0..10 {
        // conv3d
        let x = random_tensor(&mut rng, &[1, 2, 3, 5, 5]);
        let k = random_tensor(&mut rng, &[3, 2, 2, 3, 3]);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), true);
        let kid = tape.constant(k.clone());
        let yid = tape.conv3d(xid, kid, [1, 2, 1], [0, 1, 1]).unwrap();
        let y = random_tensor(&mut rng, tape.value(yid).shape());
        let lhs = dot(tape.value(yid), &y);
        let ygid = tape.constant(y.clone());
        let prod = tape.mul(yid, ygid).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let rhs = dot(&x, tape.grad(xid).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10, "conv3d adjoint: {lhs} vs {rhs}");

        // trilinear
        let x = random_tensor(&mut rng, &[1, 2, 2, 3, 4]);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), true);
        let yid = tape.trilinear(xid, [3, 5, 6]).unwrap();
        let y = random_tensor(&mut rng, tape.value(yid).shape());
        let lhs = dot(tape.value(yid), &y);
        let ygid = tape.constant(y.clone());
        let prod = tape.mul(yid, ygid).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let rhs = dot(&x, tape.grad(xid).unwrap());
        assert!(
            (lhs - rhs).abs() <= 1e-10,
            "trilinear adjoint: {lhs} vs {rhs}"
        );

        // conv_transpose3d
        let x = random_tensor(&mut rng, &[1, 2, 2, 3, 3]);
        let k = random_tensor(&mut rng, &[2, 3, 1, 4, 4]);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), true);
        let kid = tape.constant(k.clone());
        let yid = tape.conv_transpose3d(xid, kid, [1, 2, 2], [0, 1, 1]).unwrap();
        let y = random_tensor(&mut rng, tape.value(yid).shape());
        let lhs = dot(tape.value(yid), &y);
        let ygid = tape.constant(y.clone());
        let prod = tape.mul(yid, ygid).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let rhs = dot(&x, tape.grad(xid).unwrap());
        assert!(
            (lhs - rhs).abs() <= 1e-10,
            "conv_transpose3d adjoint: {lhs} vs {rhs}"
        );
    }
}
