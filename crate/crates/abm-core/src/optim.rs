//! Adam / AdamW over parameter maps, with per-tensor moment state.
//!
//! Moments are kept in f64 and parameters in f32 storage. Updates walk
//! tensors in name order, so a given (seed, gradient stream) always
//! produces bit-identical parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParameterMap;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 recovers plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning-rate schedule over a fixed iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Fixed learning rate (the production default).
    Constant,
    /// Constant for the first 60% of the budget, then exponential decay
    /// down to lr * 1e-3. Kills the limit-cycle a fixed-rate Adam settles
    /// into, which matters when converging to a stationary point.
    DecayTail,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, iter: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::DecayTail => {
                let frac = iter as f64 / total.max(1) as f64;
                if frac < 0.6 {
                    base
                } else {
                    base * 1e-3f64.powf((frac - 0.6) / 0.4)
                }
            }
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update with the configured learning rate.
    pub fn step(
        &mut self,
        params: &mut ParameterMap,
        grads: &ParameterMap,
    ) -> Result<(), TensorError> {
        let lr = self.cfg.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit learning rate (for schedules).
    pub fn step_with_lr(
        &mut self,
        params: &mut ParameterMap,
        grads: &ParameterMap,
        lr: f64,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for name in names {
            let p = params.get(&name).expect("name from same map");
            let g = match grads.get(&name) {
                Some(g) => g,
                None => continue,
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let mut data = Vec::with_capacity(p.numel());
            for (k, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
                let gd = gv as f64;
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * gd;
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * gd * gd;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut next = pv as f64 - lr * mhat / (vhat.sqrt() + self.cfg.eps);
                if self.cfg.weight_decay > 0.0 {
                    next -= lr * self.cfg.weight_decay * pv as f64;
                }
                data.push(next as f32);
            }
            let shape = p.shape().to_vec();
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(())
    }
}
