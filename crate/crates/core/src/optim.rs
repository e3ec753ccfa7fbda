//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One parameter tensor handed to [`OptimizerState::step`]. `decay` selects
/// whether weight decay applies (matrices yes, scalars no).
pub struct ParamSlot<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over all slots. Slot order and lengths must stay the same
    /// from call to call.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) {
        if self.m.is_empty() {
            self.m = slots.iter().map(|s| vec![0.0; s.values.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), slots.len(), "parameter slot count changed");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (slot, (m, v)) in slots.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(slot.values.len(), m.len(), "parameter slot resized");
            let decay = if slot.decay { 1.0 - c.lr * c.weight_decay } else { 1.0 };
            for i in 0..m.len() {
                let g = slot.grads[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let p = &mut slot.values[i];
                *p *= decay;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
