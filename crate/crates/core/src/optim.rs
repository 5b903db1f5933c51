//! First-order optimizers used by the training loops.
//!
//! All optimizers *descend* the objective they are fed; callers maximizing a
//! log density pass the negated gradient.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Optimizer choice and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig::Sgd {
            learning_rate,
            momentum: 0.0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { learning_rate, .. } | OptimizerConfig::Adam { learning_rate, .. } => *learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate() > 0.0 && self.learning_rate().is_finite(),
            "learning rate must be positive"
        );
        match *self {
            OptimizerConfig::Sgd { momentum, .. } => ensure!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)"),
            OptimizerConfig::Adam {
                beta1, beta2, epsilon, ..
            } => {
                ensure!((0.0..1.0).contains(&beta1), "beta1 must be in [0,1)");
                ensure!((0.0..1.0).contains(&beta2), "beta2 must be in [0,1)");
                ensure!(epsilon > 0.0, "epsilon must be positive");
            }
        }
        Ok(())
    }

    /// Fresh optimizer state for `dim` parameters.
    pub fn build(&self, dim: usize) -> Result<Optimizer> {
        self.validate()?;
        Ok(Optimizer {
            config: self.clone(),
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            steps: 0,
        })
    }
}

/// Stateful optimizer.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    /// One descent step on `params` with objective gradient `grad`, using
    /// the configured learning rate times `lr_factor`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr_factor: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { learning_rate, momentum } => {
                let lr = learning_rate * lr_factor;
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                let lr = learning_rate * lr_factor;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] -= lr * m / (v.sqrt() + epsilon);
                }
            }
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}
