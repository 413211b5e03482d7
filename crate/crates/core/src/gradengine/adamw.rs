use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradError, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-parameter first/second moment estimates, keyed by parameter name.
/// Decay is decoupled: the update is lr * (m_hat / (sqrt(v_hat) + eps) + wd * p),
/// evaluated at the pre-step parameter value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamWState {
    slots: BTreeMap<String, Slot>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(
        &mut self,
        cfg: &AdamWConfig,
        name: &str,
        param: &mut Tensor,
        grad: &[f64],
    ) -> Result<(), GradError> {
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        slot.t += 1;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(GradError::DivergentGradient { name: name.to_string(), step: slot.t });
        }
        let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            let p = param.data[i];
            param.data[i] = p - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p);
        }
        Ok(())
    }
}
