use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam with bias correction. Moments are keyed by parameter name.
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    /// Applies one update to every parameter in `params` that carries a
    /// gradient. Fails without modifying anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient {
                        param: name.to_string(),
                        index,
                    });
                }
            }
        }
        self.step_count += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g[i];
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m.first[i] / c1;
                let v_hat = m.second[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
