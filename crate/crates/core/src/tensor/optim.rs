//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EloError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state: per-tensor first/second moments and the step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bytes held by the moment buffers.
    pub fn state_bytes(&self) -> usize {
        self.moments.values().map(|m| 4 * (m.m.len() + m.v.len())).sum()
    }

    /// Applies one update with learning rate `lr` to every `(name, param, grad)`.
    pub fn step<'a, I>(&mut self, lr: f64, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut [f32], &'a [f32])>,
    {
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (name, param, grad) in updates {
            if param.len() != grad.len() {
                return Err(EloError::shape(format!(
                    "adamw: `{name}` has {} params but {} grads",
                    param.len(),
                    grad.len()
                )));
            }
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; param.len()],
                v: vec![0.0; param.len()],
            });
            if st.m.len() != param.len() {
                return Err(EloError::shape(format!("adamw: state for `{name}` changed shape")));
            }
            for (((w, &g), m), v) in param.iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
                *w *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}
