//! Adam with gradient-norm clipping and a warmup-then-constant schedule.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Moments;
use crate::error::{Error, Result};
use crate::model::{Gradients, Weights};

/// Linear warmup from 0 to `peak` over `warmup_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    #[serde(default = "default_lr")]
    pub peak: f32,
    #[serde(default)]
    pub warmup_steps: u64,
}

pub fn default_lr() -> f32 {
    1e-3
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            peak: default_lr(),
            warmup_steps: 0,
        }
    }
}

impl LrSchedule {
    pub fn pretraining() -> Self {
        LrSchedule {
            peak: default_lr(),
            warmup_steps: 100,
        }
    }

    /// Rate for the update taking the model from `step` to `step + 1`.
    pub fn at(&self, step: u64) -> f32 {
        if step < self.warmup_steps {
            self.peak * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            self.peak
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak.is_finite() && self.peak > 0.0) {
            return Err(Error::InvalidSettings(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Optimizer state; moment tensors mirror the weights exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub moments: Moments,
}

/// Euclidean norm over every gradient coordinate, accumulated in f64.
pub fn global_norm(grads: &Gradients) -> f32 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip(grads: &mut Gradients, max_norm: f32) -> f32 {
    let norm = global_norm(grads);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

impl Adam {
    pub fn new(weights: &Weights, config: AdamConfig) -> Self {
        Adam {
            config,
            moments: Moments {
                step: 0,
                first: weights.zeros_like(),
                second: weights.zeros_like(),
            },
        }
    }

    pub fn from_moments(weights: &Weights, config: AdamConfig, moments: Moments) -> Result<Self> {
        let shapes = |w: &Weights| {
            w.tensors()
                .iter()
                .map(|t| t.shape.clone())
                .collect::<Vec<_>>()
        };
        if shapes(&moments.first) != shapes(weights) || shapes(&moments.second) != shapes(weights) {
            return Err(Error::ShapeMismatch(
                "optimizer moments do not mirror the weights".into(),
            ));
        }
        Ok(Adam { config, moments })
    }

    /// One update in place. Returns the pre-clip gradient norm.
    pub fn step(&mut self, weights: &mut Weights, grads: &mut Gradients, lr: f32) -> f32 {
        let c = self.config;
        let norm = match c.clip_norm {
            Some(m) => clip(grads, m),
            None => global_norm(grads),
        };
        self.moments.step += 1;
        let t = self.moments.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = lr / bc1;
        let ws = weights.tensors_mut();
        let gs = grads.tensors();
        let ms = self.moments.first.tensors_mut();
        let vs = self.moments.second.tensors_mut();
        for (((w, g), m), v) in ws.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..w.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let denom = (v.data[i] / bc2).sqrt() + c.eps;
                w.data[i] -= step_size * m.data[i] / denom;
            }
        }
        norm
    }
}
