use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optimizer::{update_sigmas, Optimizer, OptimizerConfig, OptimizerKind, StepOutcome};
use crate::error::{ensure, Error, Result};
use crate::estimators::{Estimator, EstimatorConfig};
use crate::evaluation::accuracy;
use crate::layers::{Network, Sample};
use crate::numerics::{RngStream, Tensor};
use crate::oracle::bp_grad;

/// Default learning rate for backpropagation.
pub const BP_LEARNING_RATE: f64 = 1e-3;
/// Default learning rate for the likelihood-ratio and ES estimators.
pub const LR_LEARNING_RATE: f64 = 1e-2;
pub const SIGMA_LEARNING_RATE: f64 = 1e-3;

const SHUFFLE_TAG: u64 = 0x5A0F;
const NOISE_TAG: u64 = 0x4E15;

/// Source of the training gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Likelihood-ratio estimator configured by `TrainConfig::estimator`.
    #[default]
    Lr,
    /// Evolution strategies: all parameters perturbed together in weight mode.
    Es,
    Bp,
}

fn default_batch() -> usize {
    32
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

fn default_sigma_lr() -> f64 {
    SIGMA_LEARNING_RATE
}

fn default_es_sigma() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub method: GradientMethod,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Defaults to [`BP_LEARNING_RATE`] for BP and [`LR_LEARNING_RATE`] otherwise.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Weight-noise magnitude for ES.
    #[serde(default = "default_es_sigma")]
    pub es_sigma: f64,
    #[serde(default = "default_sigma_lr")]
    pub sigma_learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: GradientMethod, epochs: usize) -> Self {
        TrainConfig {
            method,
            optimizer: OptimizerKind::Adam,
            learning_rate: None,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            epochs,
            batch_size: default_batch(),
            estimator: EstimatorConfig::default(),
            es_sigma: default_es_sigma(),
            sigma_learning_rate: SIGMA_LEARNING_RATE,
            seed: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.method {
            GradientMethod::Bp => BP_LEARNING_RATE,
            GradientMethod::Lr | GradientMethod::Es => LR_LEARNING_RATE,
        })
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate(),
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Contract(m) => Error::Config(m),
            other => other,
        };
        self.optimizer_config().validate().map_err(cfg)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.sigma_learning_rate > 0.0) {
            return Err(Error::Config("sigma_learning_rate must be positive".into()));
        }
        if self.method == GradientMethod::Es && !(self.es_sigma > 0.0) {
            return Err(Error::Config("es_sigma must be positive".into()));
        }
        self.estimator.validate()
    }
}

/// Metrics recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean clean loss of the training batches, measured before each step.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Loss evaluations spent on gradient estimates so far.
    pub copies: usize,
    pub skipped_steps: usize,
    /// Noise magnitude per layer; `None` for unperturbed layers and BP.
    pub sigmas: Vec<Option<f64>>,
    pub wall_clock_secs: f64,
}

fn mean_loss(net: &Network, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += net.loss(&net.logits(s)?, s)?;
    }
    Ok(total / batch.len() as f64)
}

/// Trains `net` in place and returns one metrics row per epoch.
///
/// Every epoch shuffles the training set, steps once per batch and then
/// measures test accuracy on the noise-free network. All randomness derives
/// from `config.seed`, so identical inputs give identical results.
pub fn train(net: &mut Network, train_set: &[Sample], test_set: &[Sample], config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    ensure!(!train_set.is_empty() || config.epochs == 0, "training set is empty");
    ensure!(!test_set.is_empty() || config.epochs == 0, "test set is empty");
    let mut optimizer = Optimizer::new(config.optimizer_config(), net)?;
    let mut estimator = match config.method {
        GradientMethod::Bp => None,
        GradientMethod::Lr => Some(Estimator::new(config.estimator.clone())?),
        GradientMethod::Es => Some(Estimator::new(EstimatorConfig {
            baseline: config.estimator.baseline,
            antithetic: config.estimator.antithetic,
            qmc: config.estimator.qmc,
            ..EstimatorConfig::evolution_strategies(net, config.estimator.copies, config.es_sigma)
        })?),
    };
    let mut noise = match &estimator {
        Some(e) => Some(e.config().plan_for(net)?.entries),
        None => None,
    };
    let shuffle = RngStream::new(config.seed, SHUFFLE_TAG);
    let noise_stream = RngStream::new(config.seed, NOISE_TAG);
    let started = Instant::now();
    let mut history = Vec::with_capacity(config.epochs);
    let (mut copies, mut skipped) = (0, 0);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle.derive(&[epoch as u64]).shuffle(&mut order);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let loss = mean_loss(net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss {loss} at epoch {epoch}, step {step}")));
            }
            loss_sum += loss;
            batches += 1;
            let grads: Vec<Vec<Tensor>> = match estimator.as_mut() {
                None => bp_grad(net, &batch)?.grads,
                Some(est) => {
                    let g = est.estimate(net, &batch, &noise_stream.derive(&[epoch as u64, step as u64]))?;
                    copies += g.copies_used;
                    if let Some(entries) = noise.as_mut() {
                        if entries.iter().any(|e| e.trainable_sigma) {
                            update_sigmas(entries, &g.sigma_grads, config.sigma_learning_rate);
                            est.set_noise(entries.clone());
                        }
                    }
                    g.grads
                }
            };
            if optimizer.step(net, &grads)? == StepOutcome::Skipped {
                skipped += 1;
            }
        }
        let sigmas = match &noise {
            Some(entries) => entries.iter().map(|e| e.is_on().then_some(e.sigma)).collect(),
            None => vec![None; net.layers.len()],
        };
        history.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / batches as f64,
            test_accuracy: accuracy(net, test_set)?,
            copies,
            skipped_steps: skipped,
            sigmas,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}
