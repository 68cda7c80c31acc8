use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters from which an [`OptimizerState`] is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient: the gradient of the `log p(w)` term of a MAP objective
    /// with an isotropic Gaussian prior.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.learning_rate >= 0.0) || !(config.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        if config.kind == OptimizerKind::Adam
            && !((0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2))
        {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Applies one update using each parameter's populated gradient.
    ///
    /// sgd: `p <- p - lr (g + wd p)`; adam: the bias-corrected Adam step on
    /// `g + wd p`.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        let total: usize = params.iter().map(Tensor::len).sum();
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::usage(format!("parameter {i} has no gradient")));
            }
        }
        let cfg = self.config;
        if cfg.kind == OptimizerKind::Adam {
            if self.step_count == 0 && self.first_moment.is_empty() {
                self.first_moment = vec![0.0; total];
                self.second_moment = vec![0.0; total];
            }
            if self.first_moment.len() != total {
                return Err(Error::dim(format!(
                    "optimizer tracks {} values but parameters hold {total}",
                    self.first_moment.len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut offset = 0;
        for p in params.iter_mut() {
            let grad = p.grad().expect("checked above").to_vec();
            let n = p.len();
            let data = p.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= cfg.learning_rate * (g + cfg.weight_decay * *w);
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first_moment[offset..offset + n];
                    let v = &mut self.second_moment[offset..offset + n];
                    for (((w, g), mi), vi) in data.iter_mut().zip(&grad).zip(m).zip(v) {
                        let g = g + cfg.weight_decay * *w;
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
                    }
                }
            }
            offset += n;
            p.ensure_finite("optimizer_step")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let mut t = Tensor::vector(data).unwrap();
        t.set_grad(grad).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut state = OptimizerState::new(OptimizerConfig {
                kind,
                ..Default::default()
            })
            .unwrap();
            let mut params = vec![with_grad(vec![1.0, -2.0], vec![0.0, 0.0])];
            state.step(&mut params).unwrap();
            assert_eq!(params[0].data(), &[1.0, -2.0]);
            assert_eq!(state.step_count, 1);
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut state = OptimizerState::new(OptimizerConfig {
            learning_rate: 0.01,
            ..Default::default()
        })
        .unwrap();
        let mut params = vec![with_grad(vec![0.5, 0.5, 0.5], vec![3.0, -0.2, 1e-3])];
        state.step(&mut params).unwrap();
        let moved: Vec<f64> = params[0].data().iter().map(|w| w - 0.5).collect();
        assert!((moved[0] + 0.01).abs() < 1e-8);
        assert!((moved[1] - 0.01).abs() < 1e-8);
        assert!((moved[2] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn sgd_with_weight_decay() {
        let mut state = OptimizerState::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        })
        .unwrap();
        let mut params = vec![with_grad(vec![2.0], vec![1.0])];
        state.step(&mut params).unwrap();
        // 2 - 0.1 * (1 + 0.5 * 2)
        assert!((params[0].data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn adam_trace_matches_scalar_oracle() {
        // hand-rolled scalar Adam on f(w) = (w - 3)^2 / 2 + 0.1 sin(w)
        let grad_of = |w: f64| (w - 3.0) + 0.1 * w.cos();
        let (lr, b1, b2, eps, wd) = (0.05, 0.8, 0.99, 1e-8, 0.01);
        let (mut w, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = grad_of(w) + wd * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            expected.push(w);
        }

        let mut state = OptimizerState::new(OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
        })
        .unwrap();
        let mut params = vec![Tensor::vector(vec![-1.0]).unwrap()];
        for want in expected {
            let w = params[0].data()[0];
            params[0].set_grad(vec![grad_of(w)]).unwrap();
            state.step(&mut params).unwrap();
            assert!((params[0].data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut state = OptimizerState::new(OptimizerConfig::default()).unwrap();
        let mut params = vec![Tensor::vector(vec![1.0]).unwrap()];
        assert!(matches!(state.step(&mut params), Err(Error::Usage(_))));
    }
}
