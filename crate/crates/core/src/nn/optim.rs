use serde::{Deserialize, Serialize};

use super::model::ParamGroup;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

impl Adam {
    /// One bias-corrected update; `lrs[i]` is the learning rate of tensor `i`.
    pub fn step(&self, state: &mut AdamState, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lrs[i] * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMap {
    pub embedding: f64,
    pub encoder: f64,
    pub heads: f64,
}

impl Default for LrMap {
    fn default() -> Self {
        Self {
            embedding: 1e-4,
            encoder: 1e-4,
            heads: 1e-3,
        }
    }
}

impl LrMap {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Heads => self.heads,
        }
    }

    /// Multiplies every rate by `factor`, never going below `floor`.
    pub fn scale(&mut self, factor: f64, floor: f64) {
        for lr in [&mut self.embedding, &mut self.encoder, &mut self.heads] {
            *lr = (*lr * factor).max(floor);
        }
    }
}

/// Reduces learning rates when the monitored loss stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: u32,
    /// Relative improvement required to reset the patience counter.
    pub rel_threshold: f64,
    pub lr_min: f64,
    /// Best loss seen so far; `None` before the first evaluation.
    pub best: Option<f64>,
    pub bad_evals: u32,
    pub reductions: u32,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.5, 200, 1e-4, 1e-6)
    }
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: u32, rel_threshold: f64, lr_min: f64) -> Self {
        Self {
            factor,
            patience,
            rel_threshold,
            lr_min,
            best: None,
            bad_evals: 0,
            reductions: 0,
        }
    }

    /// Records one evaluation; returns true if the rates in `lrs` were reduced.
    pub fn observe(&mut self, loss: f64, lrs: &mut LrMap) -> bool {
        if self.best.is_none_or(|b| loss < b * (1.0 - self.rel_threshold)) {
            self.best = Some(loss);
            self.bad_evals = 0;
            return false;
        }
        self.bad_evals += 1;
        if self.bad_evals > self.patience {
            self.bad_evals = 0;
            lrs.scale(self.factor, self.lr_min);
            self.reductions += 1;
            return true;
        }
        false
    }
}

/// Everything an optimizer needs to continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub adam: Adam,
    pub moments: AdamState,
    pub lr: LrMap,
    pub scheduler: PlateauScheduler,
}
