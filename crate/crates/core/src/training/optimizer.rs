use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::TrainingError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_gate: f64,
    pub lr_main: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kind: OptimizerKind,
    /// SGD momentum; 0 disables it.
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Rescale the full gradient to at most this L2 norm before each step.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_gate: 1e-3,
            lr_main: 1e-3,
            max_epochs: 50,
            patience: 5,
            batch_size: 32,
            seed: 0,
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_grad_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    /// `allow_frozen_gate` permits `lr_gate = 0`, used to pin the router.
    pub fn validate(&self, allow_frozen_gate: bool) -> Result<(), TrainingError> {
        let gate_ok = self.lr_gate > 0.0 || (allow_frozen_gate && self.lr_gate == 0.0);
        if !gate_ok || !self.lr_gate.is_finite() || !(self.lr_main > 0.0) || !self.lr_main.is_finite() {
            return Err(TrainingError::InvalidConfig("learning rates must be positive and finite".into()));
        }
        if self.patience < 1 {
            return Err(TrainingError::InvalidConfig("patience must be at least 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(TrainingError::InvalidConfig("batch_size and max_epochs must be at least 1".into()));
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0) || !n.is_finite()) {
            return Err(TrainingError::InvalidConfig("max_grad_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainingError::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Gradient-descent state with separate rates for the gate parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    gate: Range<usize>,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, n_params: usize, gate: Range<usize>) -> Self {
        let second = if config.kind == OptimizerKind::Adam { vec![0.0; n_params] } else { Vec::new() };
        Self { config: config.clone(), gate, first: vec![0.0; n_params], second, steps: 0 }
    }

    fn rate(&self, i: usize) -> f64 {
        if self.gate.contains(&i) {
            self.config.lr_gate
        } else {
            self.config.lr_main
        }
    }

    /// Applies one update; `grads` may be rescaled in place by norm clipping.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) {
        self.steps += 1;
        if let Some(limit) = self.config.max_grad_norm {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                let scale = limit / norm;
                grads.iter_mut().for_each(|g| *g *= scale);
            }
        }
        match self.config.kind {
            OptimizerKind::Sgd => {
                let mu = self.config.momentum;
                for i in 0..params.len() {
                    let lr = self.rate(i);
                    if lr == 0.0 {
                        continue;
                    }
                    self.first[i] = mu * self.first[i] + grads[i];
                    params[i] -= lr * self.first[i];
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_epsilon);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for i in 0..params.len() {
                    let lr = self.rate(i);
                    if lr == 0.0 {
                        continue;
                    }
                    self.first[i] = b1 * self.first[i] + (1.0 - b1) * grads[i];
                    self.second[i] = b2 * self.second[i] + (1.0 - b2) * grads[i] * grads[i];
                    params[i] -= lr * (self.first[i] / c1) / ((self.second[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}
