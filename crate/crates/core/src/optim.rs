//! AdamW with per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::tensor::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every parameter of one store, plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        AdamWState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// One decoupled-weight-decay Adam update of every grouped parameter.
///
/// Each group uses its own `lr`. A parameter without a populated gradient is
/// a contract error; the store is left untouched in that case.
pub fn adamw_step(store: &mut ParamStore, groups: &[ParamGroup], state: &mut AdamWState) -> Result<()> {
    if state.m.len() != store.len() {
        return contract_err("optimizer state was built for a different parameter store");
    }
    for group in groups {
        for &id in &group.params {
            if store.get(id).grad().is_none() {
                return contract_err(format!("parameter `{}` has no gradient", store.name(id)));
            }
        }
    }
    state.t += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bias1 = 1.0 - beta1.powf(state.t as f64);
    let bias2 = 1.0 - beta2.powf(state.t as f64);
    for group in groups {
        let lr = group.lr;
        for &id in &group.params {
            let i = id.index();
            let param = store.get_mut(id);
            let grad = param.grad().expect("checked above").to_vec();
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in param.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
