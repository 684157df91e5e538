//! Adaptive-moment optimizer with decoupled weight decay, and a cosine
//! schedule with warmup and hard restarts.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Completed updates.
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of the named parameters at learning rate `lr`. Parameters
    /// without a gradient (not reached by the loss) are left untouched,
    /// decay included.
    pub fn update(&mut self, store: &ParamStore, grads: &GradStore, names: &[String], lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for name in names {
            let Some(var) = store.get(name) else { continue };
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = (m_prev.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = (v_prev.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let theta = var.as_tensor();
            let decayed = theta.affine(1.0 - lr * c.weight_decay, 0.0)?;
            let step = (m_hat / (v_hat.sqrt()? + c.eps)?)?.affine(lr, 0.0)?;
            var.set(&(decayed - step)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    /// Number of cosine cycles over the post-warmup steps.
    pub cycles: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 10,
            cycles: 1,
        }
    }
}

/// Learning-rate multiplier for 0-based update `step` of `total`: linear
/// warmup to 1, then `cycles` cosine decays each restarting at 1.
pub fn lr_multiplier(step: usize, total: usize, sched: ScheduleConfig) -> f64 {
    if step < sched.warmup_steps {
        return (step + 1) as f64 / sched.warmup_steps as f64;
    }
    let span = total.saturating_sub(sched.warmup_steps).max(1) as f64;
    let progress = (step - sched.warmup_steps) as f64 / span;
    if progress >= 1.0 {
        return 0.0;
    }
    let phase = (sched.cycles.max(1) as f64 * progress).fract();
    0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}
