use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::Array;
use crate::error::{LadError, Result};

/// Linear warmup from `lr_start` to `lr_peak`, then cosine decay to `lr_end`
/// reached exactly at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
}

impl ScheduleConfig {
    /// Learning-rate endpoints of the reference training recipe.
    pub fn reference(warmup_steps: usize, total_steps: usize) -> Self {
        Self {
            warmup_steps,
            total_steps,
            lr_start: 5e-7,
            lr_peak: 2e-5,
            lr_end: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(LadError::Schedule(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_start <= self.lr_peak && self.lr_end <= self.lr_peak) || self.lr_start < 0.0 || self.lr_end < 0.0 {
            return Err(LadError::Schedule(format!(
                "learning rates must satisfy 0 <= start, end <= peak (got {}, {}, {})",
                self.lr_start, self.lr_peak, self.lr_end
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.lr_start + (self.lr_peak - self.lr_start) * frac;
        }
        let span = (self.total_steps - 1).saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_end + 0.5 * (self.lr_peak - self.lr_end) * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only
/// (biases and normalization parameters are one-dimensional).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters whose name starts with any of these are never updated.
    pub frozen_prefixes: Vec<String>,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            frozen_prefixes: Vec::new(),
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update with the scheduled learning rate for `step`; returns that rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, step: usize, schedule: &ScheduleConfig) -> Result<f64> {
        if step >= schedule.total_steps {
            return Err(LadError::Schedule(format!(
                "step {step} beyond total_steps {}",
                schedule.total_steps
            )));
        }
        if self.m.len() != store.len() {
            return Err(LadError::Config("optimizer state does not match parameter store".into()));
        }
        if !grads.is_finite() {
            return Err(LadError::Numeric(format!("gradient at step {step}")));
        }
        let lr = schedule.lr_at(step);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if self.frozen_prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())) {
                continue;
            }
            let decay = if p.value.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let Some(g) = grads.get(id) else {
                // unreachable parameters still decay
                if decay > 0.0 {
                    p.value.data_mut().iter_mut().for_each(|w| *w -= lr * decay * *w);
                }
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((w, gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(lr)
    }
}
