//! Token extraction for grid-shaped feature maps: `[C, T, H, W]` is split
//! into non-overlapping `pt x ph x pw` blocks and flattened into a token
//! matrix `[N, C*pt*ph*pw]`. Tokens are ordered (t, h, w) row-major and
//! features (c, dt, dh, dw) row-major. Both directions are permutations of
//! the data, so the inverse is exact.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn patch_grid(dims: [usize; 3], patch: [usize; 3]) -> Result<[usize; 3]> {
    const AXES: [&str; 3] = ["t", "h", "w"];
    let mut grid = [0usize; 3];
    for a in 0..3 {
        if patch[a] == 0 || dims[a] % patch[a] != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "patchify",
                axis: AXES[a],
                msg: format!("extent {} not divisible by patch {}", dims[a], patch[a]),
            });
        }
        grid[a] = dims[a] / patch[a];
    }
    Ok(grid)
}

pub fn patchify<S: Scalar>(input: &Tensor<S>, patch: [usize; 3]) -> Result<Tensor<S>> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            op: "patchify",
            msg: format!("input must have rank 4 [C,T,H,W], got {s:?}"),
        });
    }
    let (c_n, t_n, h_n, w_n) = (s[0], s[1], s[2], s[3]);
    let [gt, gh, gw] = patch_grid([t_n, h_n, w_n], patch)?;
    let [pt, ph, pw] = patch;
    let x = input.data();
    let feat = c_n * pt * ph * pw;
    let mut out = vec![S::zero(); gt * gh * gw * feat];

    let mut o = 0usize;
    for bt in 0..gt {
        for bh in 0..gh {
            for bw in 0..gw {
                for c in 0..c_n {
                    for dt in 0..pt {
                        let t = bt * pt + dt;
                        for dh in 0..ph {
                            let h = bh * ph + dh;
                            let base = ((c * t_n + t) * h_n + h) * w_n + bw * pw;
                            for dw in 0..pw {
                                out[o] = x[base + dw];
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![gt * gh * gw, feat], out)
}

pub fn unpatchify<S: Scalar>(
    tokens: &Tensor<S>,
    patch: [usize; 3],
    grid: [usize; 3],
    channels: usize,
) -> Result<Tensor<S>> {
    let s = tokens.shape();
    let [pt, ph, pw] = patch;
    let [gt, gh, gw] = grid;
    let feat = channels * pt * ph * pw;
    if s.len() != 2 || s[0] != gt * gh * gw || s[1] != feat {
        return Err(TensorError::Invalid {
            op: "unpatchify",
            msg: format!(
                "token matrix {s:?} does not match grid {grid:?} / patch {patch:?} / {channels} channels"
            ),
        });
    }
    let (t_n, h_n, w_n) = (gt * pt, gh * ph, gw * pw);
    let x = tokens.data();
    let mut out = vec![S::zero(); channels * t_n * h_n * w_n];

    let mut i = 0usize;
    for bt in 0..gt {
        for bh in 0..gh {
            for bw in 0..gw {
                for c in 0..channels {
                    for dt in 0..pt {
                        let t = bt * pt + dt;
                        for dh in 0..ph {
                            let h = bh * ph + dh;
                            let base = ((c * t_n + t) * h_n + h) * w_n + bw * pw;
                            for dw in 0..pw {
                                out[base + dw] = x[i];
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, t_n, h_n, w_n], out)
}
