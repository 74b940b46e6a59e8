//! Adam optimizer over a fixed set of parameters.

use crate::param::{ParamId, ParamStore};

/// Adam with bias correction. Moment buffers are allocated per parameter
/// at construction; the step counter is shared across all parameters.
pub struct Adam {
    ids: Vec<ParamId>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!(lr > 0.0, "adam: learning rate must be > 0, got {lr}");
        let m = ids.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        Adam { ids, lr, beta1, beta2, eps, step: 0, m, v }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in the store.
    /// `lr_scale` multiplies the base learning rate (warmup schedules).
    pub fn step(&mut self, store: &mut ParamStore, lr_scale: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let lr = self.lr * lr_scale;
        for (slot, &id) in self.ids.iter().enumerate() {
            let n = store.value(id).numel();
            for i in 0..n {
                let g = store.grad(id).data[i];
                let m = &mut self.m[slot][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[slot][i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[slot][i] / bc1;
                let v_hat = self.v[slot][i] / bc2;
                store.value_mut(id).data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
