//! Central finite-difference verification of reverse-mode gradients.
//!
//! All checks run in `f64`. The error measure is the hybrid
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`: relative where
//! gradients are large, absolute near zero so finite-difference noise on
//! zero-gradient coordinates cannot fail a correct rule.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

/// Compare the reverse-mode gradient of a scalar-valued graph against
/// central differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// `f` must build the loss from the supplied leaf; it runs on a fresh tape
/// for the analytic pass and twice more per element for the numeric pass,
/// which keeps the two estimates independent.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(t.clone(), false);
        let loss = f(&mut tape, id)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    // analytic gradient
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, id)?;
    if !tape.value(loss).is_scalar() {
        return Err(TensorError::NonScalarLoss(tape.value(loss).shape().to_vec()));
    }
    tape.backward(loss)?;
    let analytic = match tape.grad(id) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x.shape()),
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error_up_to_rounding() {
        let x = Tensor::from_fn(&[2, 3], |i| 0.1 * i as f64 - 0.2);
        let report = finite_diff_check(|t, id| Ok(t.sum(id)), &x, 1e-5, 1e-4).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        // Negative control: the first (analytic) pass sees sum(x + x), the
        // numeric re-evaluations see sum(x), mimicking a backward rule that
        // disagrees with the forward it claims to differentiate.
        use std::cell::Cell;
        let first = Cell::new(true);
        let x = Tensor::from_fn(&[4], |i| 0.3 * i as f64 + 0.1);
        let report = finite_diff_check(
            |t, id| {
                if first.replace(false) {
                    let y = t.add(id, id)?;
                    Ok(t.sum(y))
                } else {
                    Ok(t.sum(id))
                }
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass, "mismatched gradient must fail the check");
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn silu_gradient_matches_central_difference() {
        let x = Tensor::new(vec![1], vec![0.5]).unwrap();
        let report = finite_diff_check(
            |t, id| {
                let y = t.silu(id);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max_rel_err {}", report.max_rel_err);
    }
}
