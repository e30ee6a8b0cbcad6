use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter. `steps` counts the updates this
/// parameter has received, so groups unfrozen late get their own bias
/// correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> Option<&Moments> {
        self.moments.get(index).and_then(Option::as_ref)
    }

    pub(crate) fn restore(config: AdamConfig, step: u64, moments: Vec<Option<Moments>>) -> Self {
        Adam { config, step, moments }
    }

    /// One bias-corrected update of every unfrozen parameter from its
    /// accumulated gradient. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            if store.is_param_frozen(id) {
                continue;
            }
            let p = store.param(id);
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    group: p.group.clone(),
                    name: p.name.clone(),
                });
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for id in ids {
            if store.is_param_frozen(id) {
                continue;
            }
            let p = store.param_mut(id);
            let st = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; p.grad.len()],
                v: vec![0.0; p.grad.len()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let g = p.grad[j];
                st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * g;
                st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * g * g;
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                values[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
