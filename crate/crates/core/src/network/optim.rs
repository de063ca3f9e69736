use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        let zeros = |id| {
            let (r, c) = store.value(id).shape();
            Matrix::zeros(r, c)
        };
        AdamWState {
            config,
            step: 0,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable slot from its stored gradient:
    /// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`, both terms using the old `θ`.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::usage(
                "optimizer state does not match parameter store",
            ));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.first[id.index()].as_mut_slice();
            let v = self.second[id.index()].as_mut_slice();
            for (k, (theta, &g)) in value
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .enumerate()
            {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *theta -= lr * weight_decay * *theta + lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when no clipping happened).
pub fn clip_gradients(store: &mut ParameterStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::precondition(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let norm = store.grad_norm();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        store.grad_mut(id).scale_in_place(scale);
    }
    Ok(scale)
}
