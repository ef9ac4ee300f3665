//! Named parameter groups and a decoupled-weight-decay adaptive moment
//! optimizer (bias correction on).

use moalign_core::{Scalar, Tape, Tensor, TensorId};

use crate::error::{PipelineError, Result};

/// Ordered, named collection of parameter tensors. Order is the contract:
/// gradients, optimizer state and checkpoints all index by position.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup<S> {
    items: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamGroup<S> {
    pub fn new() -> Self {
        ParamGroup { items: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.items.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor<S>)> {
        self.items.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<S> {
        &self.items[i].1
    }

    pub fn set_at(&mut self, i: usize, t: Tensor<S>) {
        self.items[i].1 = t;
    }

    pub fn scalar_count(&self) -> usize {
        self.items.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every tensor on a tape, in order.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<TensorId> {
        self.items
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Collect gradients for previously registered ids, zeros where a
    /// parameter did not participate.
    pub fn grads_from(&self, tape: &Tape<S>, ids: &[TensorId]) -> Vec<Tensor<S>> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| match tape.grad(*id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.items[i].1.shape()),
            })
            .collect()
    }

    /// Merge another group into this one (names must stay unique).
    pub fn extend(&mut self, other: ParamGroup<S>) {
        self.items.extend(other.items);
    }
}

/// Accumulator for averaging per-clip gradients over a batch.
pub struct GradAccum<S> {
    sums: Vec<Tensor<S>>,
    count: usize,
}

impl<S: Scalar> GradAccum<S> {
    pub fn new(params: &ParamGroup<S>) -> Self {
        GradAccum {
            sums: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &[Tensor<S>]) {
        debug_assert_eq!(grads.len(), self.sums.len());
        for (acc, g) in self.sums.iter_mut().zip(grads) {
            let a = acc.data_mut();
            for (x, y) in a.iter_mut().zip(g.data()) {
                *x = *x + *y;
            }
        }
        self.count += 1;
    }

    /// Mean gradients over the accumulated clips.
    pub fn mean(mut self) -> Vec<Tensor<S>> {
        let inv = S::from_f64(1.0 / self.count.max(1) as f64);
        for t in &mut self.sums {
            for v in t.data_mut() {
                *v = *v * inv;
            }
        }
        self.sums
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-3,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct AdamW<S> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, params: &ParamGroup<S>) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`,
    /// with decoupled weight decay and bias-corrected moments.
    pub fn step(&mut self, params: &mut ParamGroup<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(PipelineError::Config(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr = S::from_f64(self.cfg.lr);
        let wd = S::from_f64(self.cfg.weight_decay);
        let eps = S::from_f64(self.cfg.eps);

        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let mut w = params.tensor_at(i).clone();
            let wd_slice = w.data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                wd_slice[j] =
                    wd_slice[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * wd_slice[j]);
            }
            params.set_at(i, w);
        }
        Ok(())
    }
}

/// Global L2 norm across a gradient list.
pub fn grad_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
