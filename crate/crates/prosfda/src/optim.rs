//! Decoupled-weight-decay Adam over flat parameter vectors, with bias
//! correction. One state per trained model; drives both the pretraining and
//! the adaptation stage.

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Optimizer hyperparameters. Defaults: betas (0.9, 0.999), weight decay
/// 0.01, learning rate 6e-5, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 6e-5, beta1: 0.9, beta2: 0.999, weight_decay: 0.01, epsilon: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First/second gradient moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(param_len: usize, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { m: vec![0.0; param_len], v: vec![0.0; param_len], step_count: 0, config })
    }

    /// One update:
    /// `m, v` track the gradient and its square, bias correction divides out
    /// the cold start, and the parameter moves by
    /// `-lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)`.
    pub fn apply_step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer sized for {} params, got params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        let c = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad.values[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let p = &mut params.values[i];
            *p -= c.lr * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * *p);
        }
        Ok(())
    }
}
