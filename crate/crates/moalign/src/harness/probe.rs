//! Closed-form linear probes for motion/appearance disentanglement: ridge
//! regression for per-clip velocity, one-vs-rest ridge classification for
//! the appearance label. Probes fit on half the samples (deterministic
//! split) and score out-of-sample, so shuffled labels sit near zero.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{PipelineError, Result};
use crate::rngs::{self, tags};

const RIDGE: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
pub struct DisentanglementScores {
    pub vel_r2_from_m: f64,
    pub vel_r2_from_s: f64,
    pub app_acc_from_m: f64,
    pub app_acc_from_s: f64,
}

fn check_inputs(features: &[Vec<f64>], n_labels: usize) -> Result<usize> {
    let n = features.len();
    if n == 0 || n != n_labels {
        return Err(PipelineError::Probe(format!(
            "feature/label count mismatch: {n} vs {n_labels}"
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(PipelineError::Probe("ragged feature rows".into()));
    }
    if n < 10 * d {
        return Err(PipelineError::Probe(format!(
            "need at least 10x more samples than feature dims ({n} samples, {d} dims)"
        )));
    }
    Ok(d)
}

struct Split {
    fit: Vec<usize>,
    score: Vec<usize>,
}

fn split(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rngs::derive(seed, tags::PROBE, 0);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let half = n / 2;
    Split {
        fit: idx[..half].to_vec(),
        score: idx[half..].to_vec(),
    }
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &[Vec<f64>], rows: &[usize], d: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for j in 0..d {
                mean[j] += features[r][j];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for &r in rows {
            for j in 0..d {
                let c = features[r][j] - mean[j];
                std[j] += c * c;
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt().max(1e-8);
        }
        Standardizer { mean, std }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.mean[j]) / self.std[j])
            .collect()
    }
}

/// Ridge fit on (standardized X, centered y); returns (weights, intercept).
fn ridge_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let intercept = y.mean();
    let yc = y.map(|v| v - intercept);
    let gram = x.transpose() * x + DMatrix::identity(d, d) * (RIDGE * n);
    let rhs = x.transpose() * yc;
    let beta = Cholesky::new(gram)
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(d));
    (beta, intercept)
}

/// Out-of-sample coefficient of determination of a ridge regression from
/// features to a scalar target, clipped at 0.
fn r2_score(
    features: &[Vec<f64>],
    target: &[f64],
    sp: &Split,
    std: &Standardizer,
) -> Result<f64> {
    let d = features[0].len();
    let var: f64 = {
        let mean: f64 = target.iter().sum::<f64>() / target.len() as f64;
        target.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / target.len() as f64
    };
    if var < 1e-12 {
        return Err(PipelineError::Probe(
            "degenerate label variance in regression target".into(),
        ));
    }
    let x = DMatrix::from_fn(sp.fit.len(), d, |r, c| std.apply(&features[sp.fit[r]])[c]);
    let y = DVector::from_fn(sp.fit.len(), |r, _| target[sp.fit[r]]);
    let (beta, b0) = ridge_fit(&x, &y);

    let y_mean: f64 =
        sp.score.iter().map(|&r| target[r]).sum::<f64>() / sp.score.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for &r in &sp.score {
        let xs = std.apply(&features[r]);
        let pred: f64 = xs.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() + b0;
        ss_res += (target[r] - pred).powi(2);
        ss_tot += (target[r] - y_mean).powi(2);
    }
    if ss_tot < 1e-12 {
        return Err(PipelineError::Probe(
            "degenerate label variance in the scoring split".into(),
        ));
    }
    Ok((1.0 - ss_res / ss_tot).max(0.0))
}

/// Mean of the per-component velocity scores.
pub fn velocity_r2(features: &[Vec<f64>], velocity: &[[f64; 2]], seed: u64) -> Result<f64> {
    check_inputs(features, velocity.len())?;
    let sp = split(features.len(), seed);
    let std = Standardizer::fit(features, &sp.fit, features[0].len());
    let vx: Vec<f64> = velocity.iter().map(|v| v[0]).collect();
    let vy: Vec<f64> = velocity.iter().map(|v| v[1]).collect();
    Ok((r2_score(features, &vx, &sp, &std)? + r2_score(features, &vy, &sp, &std)?) / 2.0)
}

/// One-vs-rest linear classification accuracy on the held-out split.
pub fn appearance_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<f64> {
    let d = check_inputs(features, labels.len())?;
    let distinct = {
        let mut seen = vec![false; n_classes];
        for &l in labels {
            if l >= n_classes {
                return Err(PipelineError::Probe(format!(
                    "label {l} out of range for {n_classes} classes"
                )));
            }
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(PipelineError::Probe(
            "degenerate label variance: fewer than 2 appearance classes".into(),
        ));
    }
    let sp = split(features.len(), seed);
    let std = Standardizer::fit(features, &sp.fit, d);
    let x = DMatrix::from_fn(sp.fit.len(), d, |r, c| std.apply(&features[sp.fit[r]])[c]);
    let mut heads = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let y = DVector::from_fn(sp.fit.len(), |r, _| {
            if labels[sp.fit[r]] == class {
                1.0
            } else {
                -1.0
            }
        });
        heads.push(ridge_fit(&x, &y));
    }
    let mut correct = 0usize;
    for &r in &sp.score {
        let xs = std.apply(&features[r]);
        let best = heads
            .iter()
            .enumerate()
            .map(|(c, (beta, b0))| {
                let s: f64 = xs.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() + b0;
                (c, s)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite scores"))
            .map(|(c, _)| c)
            .expect("at least one class");
        if best == labels[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / sp.score.len() as f64)
}

/// All four probe scores over the same labels.
pub fn probe_disentanglement(
    m_features: &[Vec<f64>],
    s_features: &[Vec<f64>],
    velocity: &[[f64; 2]],
    appearance: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<DisentanglementScores> {
    Ok(DisentanglementScores {
        vel_r2_from_m: velocity_r2(m_features, velocity, seed)?,
        vel_r2_from_s: velocity_r2(s_features, velocity, seed)?,
        app_acc_from_m: appearance_accuracy(m_features, appearance, n_classes, seed)?,
        app_acc_from_s: appearance_accuracy(s_features, appearance, n_classes, seed)?,
    })
}

/// Project features to `d_out` dims through a fixed random matrix drawn
/// from `seed`; the equal-width baseline for the disentanglement check.
pub fn random_projection(features: &[Vec<f64>], d_out: usize, seed: u64) -> Vec<Vec<f64>> {
    let d_in = features.first().map(|f| f.len()).unwrap_or(0);
    let mut rng = rngs::derive(seed, tags::PROBE, 1);
    let scale = 1.0 / (d_in as f64).sqrt();
    let proj: Vec<f64> = (0..d_in * d_out)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    features
        .iter()
        .map(|f| {
            (0..d_out)
                .map(|o| (0..d_in).map(|i| f[i] * proj[i * d_out + o]).sum())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = rngs::derive(seed, tags::PROBE, 99);
        let mut feats = Vec::new();
        let mut vels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let class = i % 3;
            // features linearly encode velocity plus class indicator + noise
            let f = vec![
                v[0] + 0.01 * rng.gen_range(-1.0..1.0),
                v[1] + 0.01 * rng.gen_range(-1.0..1.0),
                class as f64,
                rng.gen_range(-1.0..1.0),
            ];
            feats.push(f);
            vels.push(v);
            labels.push(class);
        }
        (feats, vels, labels)
    }

    #[test]
    fn informative_features_score_high() {
        let (f, v, l) = synth(120, 1);
        assert!(velocity_r2(&f, &v, 7).unwrap() > 0.95);
        assert!(appearance_accuracy(&f, &l, 3, 7).unwrap() > 0.9);
    }

    #[test]
    fn raw_labels_as_features_reach_r2_one() {
        let (_, v, _) = synth(100, 2);
        let f: Vec<Vec<f64>> = v.iter().map(|x| vec![x[0], x[1]]).collect();
        let r2 = velocity_r2(&f, &v, 3).unwrap();
        assert!(r2 > 0.999, "r2 = {r2}");
    }

    #[test]
    fn shuffled_labels_score_near_zero() {
        let (f, v, _) = synth(200, 3);
        // shuffle velocities against features over 20 seeds; median near 0
        let mut scores = Vec::new();
        for s in 0..20u64 {
            let mut vs = v.clone();
            let mut rng = rngs::derive(s, tags::PROBE, 5);
            for i in (1..vs.len()).rev() {
                let j = rng.gen_range(0..=i);
                vs.swap(i, j);
            }
            scores.push(velocity_r2(&f, &vs, s).unwrap());
        }
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = scores[scores.len() / 2];
        assert!(median <= 0.05, "median shuffled r2 = {median}");
    }

    #[test]
    fn insufficient_samples_rejected() {
        let (f, v, _) = synth(30, 4);
        assert!(velocity_r2(&f, &v, 1).is_err());
    }

    #[test]
    fn degenerate_labels_rejected() {
        let (f, _, _) = synth(120, 5);
        let v = vec![[1.0, 1.0]; 120];
        assert!(velocity_r2(&f, &v, 1).is_err());
        let l = vec![0usize; 120];
        assert!(appearance_accuracy(&f, &l, 3, 1).is_err());
    }

    #[test]
    fn random_projection_shape_and_determinism() {
        let (f, _, _) = synth(50, 6);
        let a = random_projection(&f, 2, 11);
        let b = random_projection(&f, 2, 11);
        assert_eq!(a.len(), 50);
        assert_eq!(a[0].len(), 2);
        assert_eq!(a, b);
        let c = random_projection(&f, 2, 12);
        assert_ne!(a, c);
    }
}
