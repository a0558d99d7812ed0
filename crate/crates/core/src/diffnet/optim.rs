use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};

/// AdamW hyperparameters. Weight decay is decoupled: it scales θ directly
/// and never enters the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 5e-4, weight_decay: 0.2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamW {
    /// One update. `trainable[k]` gates slice `k`; frozen slices keep their
    /// values, moments and step count untouched.
    pub fn step(&self, store: &mut ParameterStore, grads: &[f64], trainable: Option<&[bool]>) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "optimizer_step",
                alloc::format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        if let Some(mask) = trainable {
            if mask.len() != store.slices().len() {
                return Err(Error::shape("optimizer_step", "trainability mask does not match slices"));
            }
        }
        let decay = 1.0 - self.lr * self.weight_decay;
        for k in 0..store.slices().len() {
            if trainable.is_some_and(|m| !m[k]) {
                continue;
            }
            let range = store.slices()[k].range();
            store.steps[k] += 1;
            let t = store.steps[k] as f64;
            let bc1 = 1.0 - libm::pow(self.beta1, t);
            let bc2 = 1.0 - libm::pow(self.beta2, t);
            for i in range {
                let g = grads[i];
                let m = self.beta1 * store.first_moment[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * store.second_moment[i] + (1.0 - self.beta2) * g * g;
                store.first_moment[i] = m;
                store.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let theta = store.theta_mut();
                theta[i] *= decay;
                theta[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}
