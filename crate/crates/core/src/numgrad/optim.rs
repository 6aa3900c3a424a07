use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use super::NumError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 2e-5 }
    }
}

/// Moments for every parameter in a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { config, t: 0, v: m.clone(), m }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One Adam update with bias correction and decoupled weight decay, using the
/// gradients stored on each trainable tensor.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<(), NumError> {
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let t = store.get(id);
        if t.requires_grad() && t.grad().is_none() {
            return Err(NumError::MissingGrad(store.name(id).to_string()));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps, weight_decay } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for id in ids {
        let tensor = store.get_mut(id);
        if !tensor.requires_grad() {
            continue;
        }
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        for (i, p) in tensor.values_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
        }
    }
    Ok(())
}
