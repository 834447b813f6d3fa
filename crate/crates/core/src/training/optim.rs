use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

/// Step schedule: the learning rate is multiplied by `decay_factor` every
/// `decay_period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    /// Zero disables decay.
    #[serde(default)]
    pub decay_period: usize,
}

fn default_decay_factor() -> f64 {
    1.0
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: default_beta1(),
                beta2: default_beta2(),
                epsilon: default_epsilon(),
            },
            learning_rate,
            decay_factor: 1.0,
            decay_period: 0,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            learning_rate,
            decay_factor: 1.0,
            decay_period: 0,
        }
    }

    pub fn with_decay(mut self, factor: f64, period: usize) -> Self {
        self.decay_factor = factor;
        self.decay_period = period;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CbmError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(CbmError::InvalidConfig("decay factor must lie in (0, 1]".into()));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(CbmError::InvalidConfig("momentum must lie in [0, 1)".into()))
            }
            OptimizerKind::Adam { beta1, beta2, epsilon }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 =>
            {
                Err(CbmError::InvalidConfig("Adam betas must lie in [0, 1), epsilon > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.decay_period == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }
}

/// Optimizer state over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; n_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            first: vec![0.0; n_params],
            second,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], epoch: usize) {
        let lr = self.config.learning_rate_at(epoch);
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, v), &g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for (((p, m), v), &g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(grad) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_halves_every_ten_epochs() {
        let c = OptimizerConfig::sgd(0.1, 0.9).with_decay(0.5, 10);
        assert_eq!(c.learning_rate_at(0), 0.1);
        assert_eq!(c.learning_rate_at(9), 0.1);
        assert_eq!(c.learning_rate_at(10), 0.05);
        assert_eq!(c.learning_rate_at(25), 0.025);
    }

    #[test]
    fn sgd_momentum_by_hand() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9), 1);
        let mut p = [1.0];
        opt.step(&mut p, &[1.0], 0);
        assert!((p[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &[1.0], 0);
        // velocity 1.9
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), 2);
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.2], 0);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        for cfg in [OptimizerConfig::adam(0.05), OptimizerConfig::sgd(0.05, 0.9)] {
            let mut opt = Optimizer::new(cfg, 2);
            let mut p = [3.0, -2.0];
            for _ in 0..2000 {
                let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
                opt.step(&mut p, &g, 0);
            }
            assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{cfg:?}: {p:?}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(OptimizerConfig::adam(0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.9).with_decay(1.5, 10).validate().is_err());
    }
}
