use serde::{Deserialize, Serialize};

use super::TrainError;

/// Inverse square-root decay after a linear warmup; `step` counts from 1.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    if s <= w {
        peak * (s / w)
    } else {
        peak * (w / s).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

impl AdamW {
    /// One bias-corrected Adam update with decoupled weight decay.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(TrainError::Config(format!(
                "AdamW shapes differ: {} params, {} grads, {} state",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
            *p -= lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}
