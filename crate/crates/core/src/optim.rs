//! Adam parameter updates and the warmup + cosine-annealing learning-rate
//! schedule.

use crate::autodiff::Param;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates per parameter, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, applied in place. Increments the step
/// counter exactly once per call.
pub fn adam_step(
    params: &mut [&mut Param],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "parameter/gradient/state count mismatch: {} params, {} grads, {} states",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.len() != g.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "gradient length {} does not match parameter `{}` length {}",
                    g.len(),
                    p.name,
                    p.len()
                ),
            ));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGrad {
                name: p.name.clone(),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);

    for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.values[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scale gradients in place so their global L2 norm does not exceed
/// `max_norm`. No-op when already within bounds.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Linear warmup from `lr_min` to `lr_max`, then cosine annealing back down
/// to `lr_min`, stepped per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr_max: 0.01,
            lr_min: 0.0001,
            warmup_epochs: 60,
            total_epochs: 300,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Invalid(format!(
                "need 0 < lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Invalid(format!(
                "need warmup < total epochs, got warmup={} total={}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a zero-based epoch index.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    schedule.validate()?;
    if epoch >= schedule.total_epochs {
        return Err(Error::Invalid(format!(
            "epoch {} out of range (total {})",
            epoch, schedule.total_epochs
        )));
    }
    let span = schedule.lr_max - schedule.lr_min;
    if epoch < schedule.warmup_epochs {
        let frac = (epoch + 1) as f64 / schedule.warmup_epochs as f64;
        return Ok(schedule.lr_min + span * frac);
    }
    let denom = (schedule.total_epochs - 1 - schedule.warmup_epochs).max(1) as f64;
    let phase = std::f64::consts::PI * (epoch - schedule.warmup_epochs) as f64 / denom;
    Ok(schedule.lr_min + 0.5 * span * (1.0 + phase.cos()))
}
