use std::collections::BTreeMap;

use super::{ParameterStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: None,
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by `tag/name`, so one
/// optimizer can drive several stores.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over all stores from their accumulated gradients, which are
    /// then zeroed.
    pub fn step<S: Scalar>(&mut self, stores: &mut [&mut ParameterStore<S>]) {
        self.step += 1;
        let c = self.config;
        let clip = match c.max_grad_norm {
            Some(max) => {
                let sq: f64 = stores
                    .iter()
                    .flat_map(|s| s.iter())
                    .flat_map(|(_, p)| p.grad.iter())
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for store in stores.iter_mut() {
            let tag = store.tag().to_string();
            for (name, p) in store.iter_mut() {
                let key = format!("{tag}/{name}");
                let n = p.value.len();
                let (m, v) = self.moments.entry(key).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let mut values = p.value.to_vec();
                for i in 0..n {
                    let g = p.grad[i].as_f64() * clip;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    let mut w = values[i].as_f64();
                    w *= 1.0 - c.lr * c.weight_decay;
                    w -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    values[i] = S::lit(w);
                }
                p.value = Tensor::raw(p.value.shape().to_vec(), values);
                p.grad.iter_mut().for_each(|g| *g = S::zero());
            }
        }
    }
}
