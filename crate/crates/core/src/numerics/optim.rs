use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.05
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Per-parameter AdamW moments.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize, config: AdamWConfig) -> Self {
        AdamWState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
            config,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ).
pub fn adamw_step(param: &Matrix, grad: &Matrix, state: &mut AdamWState, lr: f64) -> Result<Matrix> {
    param.ensure_same_shape(grad, "adamw_step")?;
    param.ensure_same_shape(&state.m, "adamw_step state")?;
    if !grad.is_finite() {
        return Err(LabError::numeric("non-finite gradient passed to AdamW"));
    }
    let c = state.config;
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let mut out = param.clone();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in out.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
    }
    Ok(out)
}

/// Linear warm-up followed by cosine decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LrSchedule {
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub peak_lr: f64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, iter: u64) -> Result<f64> {
        if self.warmup_iters > self.total_iters {
            return Err(LabError::contract(format!(
                "warm-up {} exceeds total {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if iter > self.total_iters {
            return Err(LabError::contract(format!(
                "iteration {iter} beyond schedule end {}",
                self.total_iters
            )));
        }
        if iter < self.warmup_iters {
            return Ok(self.peak_lr * iter as f64 / self.warmup_iters as f64);
        }
        let span = self.total_iters - self.warmup_iters;
        if span == 0 {
            return Ok(self.min_lr);
        }
        let progress = (iter - self.warmup_iters) as f64 / span as f64;
        Ok(self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
