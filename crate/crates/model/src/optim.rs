//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::schedule::Scheduler;
use crate::transformer::Segment;
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    #[default]
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scheduler: Scheduler,
    pub schedule_unit: ScheduleUnit,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm clipping threshold; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scheduler: Scheduler::None,
            schedule_unit: ScheduleUnit::Epoch,
            epochs: 1000,
            batch_size: 32,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        self.scheduler.validate(self.learning_rate)?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(n_params: usize, segments: &[Segment]) -> Self {
        let mut decay_mask = vec![false; n_params];
        for s in segments {
            decay_mask[s.range.clone()].fill(s.decay);
        }
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            decay_mask,
        }
    }

    pub fn restore(&mut self, m: Vec<f32>, v: Vec<f32>, t: u64) -> Result<(), ModelError> {
        for (what, buf) in [("adam m", &m), ("adam v", &v)] {
            if buf.len() != self.m.len() {
                return Err(ModelError::ShapeMismatch {
                    what,
                    expected: self.m.len(),
                    got: buf.len(),
                });
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let decay = (lr * cfg.weight_decay) as f32;
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = cfg.eps as f32;
        for i in 0..params.len() {
            if self.decay_mask[i] {
                params[i] -= decay * params[i];
            }
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let denom = self.v[i].sqrt() / bc2_sqrt + eps;
            params[i] -= step_size * self.m[i] / denom;
        }
    }
}

/// Scales `grads` so its L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}
