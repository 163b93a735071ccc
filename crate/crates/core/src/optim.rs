//! Adam with bias correction and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Parameter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f32| (0.0..1.0).contains(&b);
        if !ok_beta(self.beta1) || !ok_beta(self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 || self.learning_rate < 0.0 {
            return Err(Error::Config("adam epsilon must be > 0, lr and decay >= 0".into()));
        }
        Ok(())
    }
}

/// One Adam update over every non-frozen parameter. Frozen parameters are
/// left untouched; all grads are cleared afterwards.
pub fn adam_step(params: &mut [Parameter<f32>], config: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.frozen && p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let lr = config.learning_rate;
    for p in params.iter_mut() {
        let grad = p.grad.take();
        if p.frozen {
            continue;
        }
        let grad = grad.expect("checked above");
        let st = &mut p.state;
        st.step += 1;
        let bc1 = 1.0 - b1.powi(st.step as i32);
        let bc2 = 1.0 - b2.powi(st.step as i32);
        let data = p.tensor.data_mut();
        for (((w, &g), m), v) in data
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            let mut update = mhat / (vhat.sqrt() + config.epsilon);
            if config.weight_decay > 0.0 {
                update += config.weight_decay * *w;
            }
            *w -= lr * update;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over the first `warmup_fraction` of steps, then linear
    /// decay to zero at `total_steps`.
    WarmupLinear { total_steps: usize, warmup_fraction: f32 },
}

impl LrSchedule {
    pub fn warmup_linear(total_steps: usize) -> Self {
        Self::WarmupLinear {
            total_steps,
            warmup_fraction: 0.1,
        }
    }

    /// Multiplier on the base rate for zero-based `step`.
    pub fn factor(&self, step: usize) -> f32 {
        match *self {
            Self::Constant => 1.0,
            Self::WarmupLinear {
                total_steps,
                warmup_fraction,
            } => {
                if total_steps == 0 {
                    return 0.0;
                }
                let warmup = ((total_steps as f32) * warmup_fraction).ceil().max(1.0) as usize;
                let s = step + 1;
                if s <= warmup {
                    s as f32 / warmup as f32
                } else {
                    let rest = (total_steps - warmup).max(1) as f32;
                    ((total_steps.saturating_sub(s)) as f32 / rest).max(0.0)
                }
            }
        }
    }
}
