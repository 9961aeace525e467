//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.
//!
//! The optimizer operates on flat `f64` slices so any parameter tensor
//! (matrices, bias vectors, the log-temperature scalar) shares one code path.
//! Weight decay is decoupled (applied directly to the parameter, scaled by
//! the current learning rate) and is multiplied by the group learning rate,
//! so a group with `lr = 0` is left bit-identical — that property is what
//! freezes the encoder during classifier-only retraining.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SwatError};

/// Adam moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Update count, shared bias-correction clock for this tensor.
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Adam hyperparameters; `weight_decay` is decoupled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// One AdamW update of `param` in place. `lr` is the already-scheduled
/// learning rate for this group at this step.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..param.len() {
        // Decoupled decay: pull the weight toward zero before the Adam step.
        param[i] -= lr * hyper.weight_decay * param[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grad[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// Linear warmup to the peak rate, then cosine decay to zero at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WarmupCosine {
    pub warmup: u64,
    pub total: u64,
}

impl WarmupCosine {
    pub fn new(warmup: u64, total: u64) -> Result<Self> {
        if total == 0 {
            return Err(SwatError::invalid("schedule.total", "need >= 1 step"));
        }
        Ok(WarmupCosine { warmup: warmup.min(total), total })
    }

    /// Multiplier in `[0, 1]` for the 0-based step index.
    pub fn scale(&self, step: u64) -> f64 {
        let step = step.min(self.total - 1);
        if step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else if self.total == self.warmup {
            1.0
        } else {
            let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
