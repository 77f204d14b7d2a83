//! AdamW with decoupled weight decay.
//!
//! Decay multiplies the parameter directly before the moment update (it never
//! enters the gradient), moments are bias-corrected, and the update order is
//! fixed so optimizer trajectories are bit-reproducible across runs.

use crate::params::ParamStore;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_EPS: f64 = 1e-8;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::with_config(store, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_WEIGHT_DECAY)
    }

    pub fn with_config(
        store: &ParamStore,
        lr: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    ) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        AdamW { lr, beta1, beta2, weight_decay, eps: DEFAULT_EPS, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated in the store.
    /// Gradients are left untouched; callers zero them afterwards.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).to_vec();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                // Decoupled decay first, then the bias-corrected Adam step.
                value[i] -= self.lr * self.weight_decay * value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Flat snapshot of (step, first moments, second moments) for
    /// checkpointing; moments follow parameter registration order.
    pub fn export_state(&self) -> (u64, Vec<f64>, Vec<f64>) {
        let flat = |xs: &[Vec<f64>]| xs.iter().flatten().copied().collect();
        (self.step, flat(&self.m), flat(&self.v))
    }

    /// Restore a snapshot taken by `export_state` on an identically shaped
    /// store. Returns false if the flat lengths do not match.
    pub fn import_state(&mut self, step: u64, m: &[f64], v: &[f64]) -> bool {
        let total: usize = self.m.iter().map(|x| x.len()).sum();
        if m.len() != total || v.len() != total {
            return false;
        }
        self.step = step;
        let mut off = 0;
        for (mi, vi) in self.m.iter_mut().zip(self.v.iter_mut()) {
            let n = mi.len();
            mi.copy_from_slice(&m[off..off + n]);
            vi.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        true
    }
}

/// Cosine annealing from `eta_max` at step 0 to `eta_min` at `total` steps.
pub fn cosine_lr(step: u64, total: u64, eta_max: f64, eta_min: f64) -> f64 {
    if total == 0 {
        return eta_min;
    }
    let t = (step.min(total) as f64) / total as f64;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
