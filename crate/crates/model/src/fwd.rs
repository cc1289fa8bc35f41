//! Per-step forward context: parameter bindings, train/eval mode, the run
//! RNG for stochastic depth, and the batch-norm buffer updates collected
//! during the pass.

use std::cell::RefCell;

use radenc_core::tensor::{Arr, Bindings, Tensor};
use radenc_core::Rng;

pub struct Fwd<'a> {
    bindings: &'a Bindings,
    pub train: bool,
    rng: RefCell<Option<&'a mut Rng>>,
    buffer_updates: RefCell<Vec<(String, Arr)>>,
}

impl<'a> Fwd<'a> {
    pub fn train(bindings: &'a Bindings, rng: &'a mut Rng) -> Self {
        Fwd {
            bindings,
            train: true,
            rng: RefCell::new(Some(rng)),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn eval(bindings: &'a Bindings) -> Self {
        Fwd {
            bindings,
            train: false,
            rng: RefCell::new(None),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn get(&self, path: &str) -> Tensor {
        self.bindings.get(path)
    }

    pub fn try_get(&self, path: &str) -> Option<Tensor> {
        self.bindings.try_get(path)
    }

    pub fn bindings(&self) -> &Bindings {
        self.bindings
    }

    /// Draw from the run RNG; panics when called in eval mode.
    pub fn with_rng<T>(&self, f: impl FnOnce(&mut Rng) -> T) -> T {
        let mut guard = self.rng.borrow_mut();
        let rng = guard.as_mut().expect("RNG draw in eval-mode forward");
        f(rng)
    }

    /// Record a buffer value (running statistics) to write back after the step.
    pub fn push_buffer_update(&self, path: String, value: Arr) {
        self.buffer_updates.borrow_mut().push((path, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(String, Arr)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

/// Linear layer bound at `prefix` (`.weight` / optional `.bias`), applying a
/// low-rank correction when `.lora_a` / `.lora_b` exist: the adapted map is
/// `W x + (alpha/r) B A x` with the scale stored at `.lora_scale`.
pub fn linear_param(fwd: &Fwd, prefix: &str, x: &Tensor) -> Tensor {
    let w = fwd.get(&format!("{prefix}.weight"));
    let b = fwd.try_get(&format!("{prefix}.bias"));
    let y = radenc_core::ops::linear(x, &w, b.as_ref());
    if let Some(a) = fwd.try_get(&format!("{prefix}.lora_a")) {
        let bm = fwd.get(&format!("{prefix}.lora_b"));
        let scale = fwd.get(&format!("{prefix}.lora_scale")).value()[[0]];
        let xa = radenc_core::ops::linear(x, &a, None);
        let xab = radenc_core::ops::linear(&xa, &bm, None);
        return radenc_core::ops::add(&y, &radenc_core::ops::scale(&xab, scale));
    }
    y
}

/// Layer norm bound at `prefix` (`.gamma` / `.beta`).
pub fn layer_norm_param(fwd: &Fwd, prefix: &str, x: &Tensor) -> Tensor {
    let gamma = fwd.get(&format!("{prefix}.gamma"));
    let beta = fwd.get(&format!("{prefix}.beta"));
    radenc_core::ops::layer_norm(x, &gamma, &beta, 1e-6)
}

/// Batch norm bound at `prefix`; in train mode normalizes with batch
/// statistics and queues running-stat updates, in eval mode uses the stored
/// running statistics.
pub fn batch_norm_param(fwd: &Fwd, prefix: &str, x: &Tensor, momentum: f64) -> Tensor {
    let gamma = fwd.get(&format!("{prefix}.gamma"));
    let beta = fwd.get(&format!("{prefix}.beta"));
    let rm_path = format!("{prefix}.running_mean");
    let rv_path = format!("{prefix}.running_var");
    if fwd.train {
        let (y, bmean, bvar) = radenc_core::ops::batch_norm_train(x, &gamma, &beta, 1e-5);
        let rm = fwd.get(&rm_path);
        let rv = fwd.get(&rv_path);
        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
        // Unbiased variance for the running estimate.
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let new_rm = rm.value() * (1.0 - momentum) + &(bmean.into_dyn() * momentum);
        let new_rv = rv.value() * (1.0 - momentum) + &(bvar.into_dyn() * (momentum * unbias));
        fwd.push_buffer_update(rm_path, new_rm);
        fwd.push_buffer_update(rv_path, new_rv);
        y
    } else {
        let rm = fwd.get(&rm_path);
        let rv = fwd.get(&rv_path);
        radenc_core::ops::batch_norm_eval(x, &gamma, &beta, rm.value(), rv.value(), 1e-5)
    }
}
