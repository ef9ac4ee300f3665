use moalign_core::conv::{conv3d, conv3d_out_dims, conv_transpose3d, conv_transpose3d_out_dims};
use moalign_core::interp::trilinear;
use moalign_core::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// conv output shape follows (in + 2p - k) / s + 1 on every axis.
    #[test]
    fn conv_shape_formula(
        t_in in 1usize..5, h_in in 1usize..6, w_in in 1usize..6,
        kt in 1usize..4, kh in 1usize..4, kw in 1usize..4,
        st in 1usize..3, sh in 1usize..3, sw in 1usize..3,
        pt in 0usize..2, ph in 0usize..2, pw in 0usize..2,
    ) {
        let ok = kt <= t_in + 2 * pt && kh <= h_in + 2 * ph && kw <= w_in + 2 * pw;
        let x = Tensor::<f64>::zeros(&[1, 1, t_in, h_in, w_in]);
        let k = Tensor::<f64>::zeros(&[2, 1, kt, kh, kw]);
        let res = conv3d(&x, &k, [st, sh, sw], [pt, ph, pw]);
        prop_assert_eq!(ok, res.is_ok());
        if let Ok(y) = res {
            let dims = conv3d_out_dims(
                [t_in, h_in, w_in], [kt, kh, kw], [st, sh, sw], [pt, ph, pw],
            ).unwrap();
            prop_assert_eq!(y.shape(), &[1, 2, dims[0], dims[1], dims[2]]);
            prop_assert_eq!(dims[0], (t_in + 2 * pt - kt) / st + 1);
            prop_assert_eq!(dims[1], (h_in + 2 * ph - kh) / sh + 1);
            prop_assert_eq!(dims[2], (w_in + 2 * pw - kw) / sw + 1);
        }
    }

    /// transposed-conv output shape follows (in - 1) * s - 2p + k.
    #[test]
    fn conv_transpose_shape_formula(
        t_in in 1usize..4, h_in in 1usize..5, w_in in 1usize..5,
        kt in 1usize..4, kh in 1usize..4, kw in 1usize..4,
        st in 1usize..3, sh in 1usize..3, sw in 1usize..3,
        ph in 0usize..2, pw in 0usize..2,
    ) {
        let grows = |i: usize, k: usize, s: usize, p: usize| (i - 1) * s + k > 2 * p;
        let ok = grows(t_in, kt, st, 0) && grows(h_in, kh, sh, ph) && grows(w_in, kw, sw, pw);
        let x = Tensor::<f64>::zeros(&[1, 1, t_in, h_in, w_in]);
        let k = Tensor::<f64>::zeros(&[1, 2, kt, kh, kw]);
        let res = conv_transpose3d(&x, &k, [st, sh, sw], [0, ph, pw]);
        prop_assert_eq!(ok, res.is_ok());
        if let Ok(y) = res {
            let dims = conv_transpose3d_out_dims(
                [t_in, h_in, w_in], [kt, kh, kw], [st, sh, sw], [0, ph, pw],
            ).unwrap();
            prop_assert_eq!(y.shape(), &[1, 2, dims[0], dims[1], dims[2]]);
            prop_assert_eq!(dims[0], (t_in - 1) * st + kt);
            prop_assert_eq!(dims[1], (h_in - 1) * sh + kh - 2 * ph);
        }
    }

    /// resize to the source dims is a bit-exact passthrough.
    #[test]
    fn trilinear_identity(
        t in 1usize..4, h in 1usize..5, w in 1usize..5,
        seed in 0u64..1000,
    ) {
        let x = Tensor::<f64>::from_fn(&[1, 2, t, h, w], |i| {
            ((i as u64).wrapping_mul(seed.wrapping_add(7)) % 1000) as f64 * 0.001
        });
        let y = trilinear(&x, [t, h, w]).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    /// repeated evaluation of the same op on the same input is bitwise equal.
    #[test]
    fn forward_determinism(seed in 0u64..500) {
        let x = Tensor::<f32>::from_fn(&[1, 2, 2, 4, 4], |i| {
            (((i as u64).wrapping_mul(seed + 3) % 997) as f32) * 0.003 - 1.2
        });
        let k = Tensor::<f32>::from_fn(&[2, 2, 1, 3, 3], |i| {
            (((i as u64).wrapping_mul(seed + 11) % 991) as f32) * 0.002 - 0.9
        });
        let a = conv3d(&x, &k, [1, 1, 1], [0, 1, 1]).unwrap();
        let b = conv3d(&x, &k, [1, 1, 1], [0, 1, 1]).unwrap();
        prop_assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    /// all outputs stay finite on finite inputs.
    #[test]
    fn finite_in_finite_out(seed in 0u64..200) {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3, 3], |i| {
            (((i as u64).wrapping_mul(seed + 5) % 83) as f64) * 7.0 - 300.0
        });
        let k = Tensor::<f64>::from_fn(&[2, 1, 1, 2, 2], |i| {
            (((i as u64).wrapping_mul(seed + 13) % 89) as f64) * 0.3 - 13.0
        });
        let y = conv3d(&x, &k, [1, 1, 1], [0, 0, 0]).unwrap();
        prop_assert!(y.is_all_finite());
        let z = trilinear(&y, [3, 4, 4]).unwrap();
        prop_assert!(z.is_all_finite());
    }
}
