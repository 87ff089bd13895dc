//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::{Param, ParamId, ParamStore};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    /// Applies one update to every parameter that has a gradient and a
    /// positive rate. Each parameter keeps its own step count.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, rate: impl Fn(&Param) -> f64) {
        let c = self.config;
        for (&id, g) in grads {
            let lr = rate(store.get(id));
            if lr <= 0.0 {
                continue;
            }
            let p = store.get_mut(id);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape().to_vec()),
                v: Tensor::zeros(g.shape().to_vec()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            let (m, v, w) = (st.m.data_mut(), st.v.data_mut(), p.value.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                w[i] -= lr * (update + c.weight_decay * w[i]);
            }
        }
    }
}
