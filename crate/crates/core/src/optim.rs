//! AdamW with decoupled weight decay, plus global-norm gradient clipping
//! and the gradient accumulator used for large effective batches.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Arr;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over the supplied gradients. Frozen entries and buffers
    /// are rejected; weight decay applies to tensors with ndim >= 2 only.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Arr>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, grad) in grads {
            let entry = store.get(path)?;
            if entry.frozen || entry.buffer {
                return Err(Error::config(format!(
                    "gradient supplied for non-trainable entry `{path}`"
                )));
            }
            if entry.value.shape() != grad.shape() {
                return Err(Error::shape(format!(
                    "gradient shape mismatch for `{path}`"
                )));
            }
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|mv, &g| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|vv, &g| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
            });
            let decay = if entry.value.ndim() >= 2 { weight_decay } else { 0.0 };
            let mut new_value = entry.value.clone();
            ndarray::Zip::from(&mut new_value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *p);
                });
            store.set_value(path, new_value)?;
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_grad_norm(grads: &BTreeMap<String, Arr>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients in place so the global norm is at most `max_norm`.
/// Returns the post-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Arr>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        return global_grad_norm(grads);
    }
    norm
}

/// Running sum of gradients across micro-batches. `finish(scale)` returns
/// the scaled total, e.g. scale = 1 / total_items for a mean-style loss
/// accumulated as per-item sums.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    acc: BTreeMap<String, Arr>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: &BTreeMap<String, Arr>) {
        for (path, g) in grads {
            match self.acc.get_mut(path) {
                Some(a) => *a += g,
                None => {
                    self.acc.insert(path.clone(), g.clone());
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn finish(mut self, scale: f64) -> BTreeMap<String, Arr> {
        for g in self.acc.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        self.acc
    }
}
