//! Adam with decoupled weight decay, plus the linear warmup/decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
/// Fraction of total steps spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.10;

/// Per-parameter Adam accumulator state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(numel: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; numel],
            second_moment: vec![0.0; numel],
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is decoupled: it is applied
/// directly to the parameter, never through the moment estimates.
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamState,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.numel()
        || state.first_moment.len() != param.numel()
        || state.second_moment.len() != param.numel()
    {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    if state.learning_rate < 0.0 {
        return Err(Error::contract("adam_step: learning_rate must be >= 0"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let lr = state.learning_rate;
    let data = param.data_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] =
            state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        data[i] -= lr * (m_hat / (v_hat.sqrt() + state.epsilon) + weight_decay * data[i]);
    }
    Ok(())
}

/// Linear warmup over the first 10% of steps, then linear decay to exactly 0
/// at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, peak_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("lr_schedule: total_steps must be > 0"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "lr_schedule: step {step} exceeds total_steps {total_steps}"
        )));
    }
    let warmup = WARMUP_FRACTION * total_steps as f64;
    let s = step as f64;
    let lr = if s < warmup {
        peak_lr * s / warmup
    } else {
        peak_lr * (total_steps as f64 - s) / (total_steps as f64 - warmup)
    };
    Ok(lr)
}

/// Adam over a named parameter set; lazily creates per-tensor state.
#[derive(Debug, Default)]
pub struct AdamOptimizer {
    states: BTreeMap<String, AdamState>,
    pub weight_decay: f64,
}

impl AdamOptimizer {
    pub fn new(weight_decay: f64) -> Self {
        AdamOptimizer {
            states: BTreeMap::new(),
            weight_decay,
        }
    }

    /// Apply one update with the given learning rate to every named gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
        learning_rate: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(param.numel(), learning_rate));
            state.learning_rate = learning_rate;
            adam_step(param, grad, state, self.weight_decay)?;
        }
        Ok(())
    }
}
