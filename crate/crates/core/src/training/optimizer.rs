use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::layers::{Network, NoiseEntry};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Heavy-ball momentum for SGD; 0 gives plain gradient descent.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive, got {}",
            self.learning_rate
        );
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.epsilon > 0.0, "Adam epsilon must be positive");
        Ok(())
    }
}

/// Whether a step changed the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient had a non-finite entry; nothing was changed.
    Skipped,
}

/// Optimizer state for every parameter tensor of one network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<Tensor>>,
    second: Vec<Vec<Tensor>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<Tensor>> = net
            .layers
            .iter()
            .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        Ok(Optimizer {
            config,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one descent step with `grads[l][p]` for each parameter.
    pub fn step(&mut self, net: &mut Network, grads: &[Vec<Tensor>]) -> Result<StepOutcome> {
        ensure!(grads.len() == net.layers.len(), "gradient does not cover every layer");
        for (layer, g) in net.layers.iter().zip(grads) {
            let params = layer.params();
            ensure!(
                params.len() == g.len() && params.iter().zip(g).all(|(p, q)| p.shape() == q.shape()),
                "gradient shapes do not match the {} layer",
                layer.name()
            );
        }
        if !grads.iter().flatten().all(Tensor::is_finite) {
            return Ok(StepOutcome::Skipped);
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as f64;
        let (bc1, bc2) = (1.0 - c.beta1.powf(t), 1.0 - c.beta2.powf(t));
        for (l, layer) in net.layers.iter_mut().enumerate() {
            for (p, param) in layer.params_mut().into_iter().enumerate() {
                let g = grads[l][p].data();
                let m = self.first[l][p].data_mut();
                let w = param.data_mut();
                match c.kind {
                    OptimizerKind::Sgd => {
                        for k in 0..w.len() {
                            m[k] = c.momentum * m[k] + g[k];
                            w[k] -= c.learning_rate * m[k];
                        }
                    }
                    OptimizerKind::Adam => {
                        let v = self.second[l][p].data_mut();
                        for k in 0..w.len() {
                            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                            w[k] -= c.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.epsilon);
                        }
                    }
                }
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Gradient step on `log sigma^2` for every entry with a trainable magnitude.
/// `sigma_grads[l]` is `dL/d(sigma^2)`, so the log-scale gradient is
/// `sigma^2` times it and `sigma` stays positive. Non-finite gradients are
/// ignored.
pub fn update_sigmas(entries: &mut [NoiseEntry], sigma_grads: &[Option<f64>], learning_rate: f64) {
    for (e, g) in entries.iter_mut().zip(sigma_grads) {
        if let (true, Some(g)) = (e.trainable_sigma && e.is_on(), g) {
            if g.is_finite() {
                let var = e.sigma * e.sigma;
                e.sigma *= (-0.5 * learning_rate * var * g).exp();
            }
        }
    }
}
