//! Robustness protocol: gradient-based attacks, input corruptions, graph
//! edge attacks and accuracy measurement.

mod attack;
mod corrupt;
mod graph;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attack::{adversarial_example, AttackOutcome};
pub use corrupt::{corrupt, MASK_TOKEN, POISSON_SCALE};
pub use graph::{graph_attack, GraphAttack};

use crate::error::{ensure, Error, Result};
use crate::layers::{Network, Sample};
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Ifgsm,
    Mifgsm,
    Gaussian,
    Uniform,
    Poisson,
    Grey,
    RanmaskImage,
    RanmaskSeq,
    Shuffle,
    RandomEdge,
    Dice,
}

impl AttackMethod {
    pub fn is_gradient(self) -> bool {
        matches!(self, AttackMethod::Fgsm | AttackMethod::Ifgsm | AttackMethod::Mifgsm)
    }

    pub fn is_graph(self) -> bool {
        matches!(self, AttackMethod::RandomEdge | AttackMethod::Dice)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Ifgsm => "ifgsm",
            AttackMethod::Mifgsm => "mifgsm",
            AttackMethod::Gaussian => "gaussian",
            AttackMethod::Uniform => "uniform",
            AttackMethod::Poisson => "poisson",
            AttackMethod::Grey => "grey",
            AttackMethod::RanmaskImage => "ranmask_image",
            AttackMethod::RanmaskSeq => "ranmask_seq",
            AttackMethod::Shuffle => "shuffle",
            AttackMethod::RandomEdge => "random_edge",
            AttackMethod::Dice => "dice",
        }
    }

    /// Default for `AttackSpec::ratio`.
    pub fn default_ratio(self) -> f64 {
        match self {
            AttackMethod::RanmaskSeq => 0.9,
            AttackMethod::RandomEdge | AttackMethod::Dice => 0.1,
            _ => 0.5,
        }
    }
}

pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_MOMENTUM: f64 = 1.0;

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

/// One attack or corruption. `epsilon` is the per-pixel budget of gradient
/// attacks and the noise scale of `gaussian` (standard deviation) and
/// `uniform` (half-width). `ratio` is the masked fraction or the edge ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: AttackMethod,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Defaults to `epsilon / iterations`.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Defaults to [`AttackMethod::default_ratio`].
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl AttackSpec {
    pub fn new(method: AttackMethod) -> Self {
        AttackSpec {
            method,
            epsilon: DEFAULT_EPSILON,
            iterations: DEFAULT_ITERATIONS,
            step_size: None,
            ratio: None,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.ratio = Some(ratio);
        self
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / self.iterations.max(1) as f64)
    }

    pub fn ratio(&self) -> f64 {
        self.ratio.unwrap_or(self.method.default_ratio())
    }

    /// Short label such as `fgsm_eps0.1`, used as a metrics column name.
    pub fn label(&self) -> String {
        let m = self.method.name();
        if self.method.is_gradient() || matches!(self.method, AttackMethod::Gaussian | AttackMethod::Uniform) {
            format!("{m}_eps{}", self.epsilon)
        } else if matches!(self.method, AttackMethod::Poisson | AttackMethod::Grey | AttackMethod::Shuffle) {
            m.to_string()
        } else {
            format!("{m}_r{}", self.ratio())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.step_size() >= 0.0 && self.step_size().is_finite()) {
            return bad("step_size must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ratio()) {
            return bad(format!("ratio must lie in [0, 1], got {}", self.ratio()));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return bad("momentum must be non-negative".into());
        }
        Ok(())
    }
}

/// Count of items out of `n` selected by `ratio`, rounded up. Products within
/// rounding error of an integer are not bumped to the next one.
pub(crate) fn ratio_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Fraction of correct argmax predictions over every scored item (one per
/// class sample, one per listed node for node targets).
pub fn accuracy(net: &Network, samples: &[Sample]) -> Result<f64> {
    let counts = samples
        .par_iter()
        .map(|s| correct_count(net, s))
        .collect::<Result<Vec<_>>>()?;
    tally(&counts)
}

fn correct_count(net: &Network, sample: &Sample) -> Result<(usize, usize)> {
    let pred = net.predict(sample)?;
    let truth: Vec<usize> = match &sample.target {
        crate::layers::Target::Class(c) => vec![*c],
        crate::layers::Target::Nodes(nodes) => {
            let g = sample.graph().ok_or_else(|| Error::contract("node target without a graph"))?;
            nodes.iter().map(|&i| g.labels[i]).collect()
        }
    };
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok((hits, truth.len()))
}

fn tally(counts: &[(usize, usize)]) -> Result<f64> {
    let (hits, total) = counts.iter().fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
    ensure!(total > 0, "accuracy needs at least one scored item");
    Ok(hits as f64 / total as f64)
}

/// Accuracy on `samples`, optionally after applying `spec` to each one.
/// Sample `i` uses the stream `stream.derive(&[i])`, so results do not depend
/// on the thread count.
pub fn evaluate_accuracy(net: &Network, samples: &[Sample], spec: Option<&AttackSpec>, stream: &RngStream) -> Result<f64> {
    let Some(spec) = spec else {
        return accuracy(net, samples);
    };
    spec.validate()?;
    let counts = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream.derive(&[i as u64]);
            let attacked = attacked_sample(net, s, spec, &mut rng)?;
            correct_count(net, &attacked)
        })
        .collect::<Result<Vec<_>>>()?;
    tally(&counts)
}

/// `sample` with `spec` applied to its input or graph.
pub fn attacked_sample(net: &Network, sample: &Sample, spec: &AttackSpec, rng: &mut RngStream) -> Result<Sample> {
    let mut out = sample.clone();
    if spec.method.is_gradient() {
        out.input = adversarial_example(net, sample, spec)?.input;
    } else if spec.method.is_graph() {
        let g = sample
            .graph()
            .ok_or_else(|| Error::contract(format!("{} needs a graph sample", spec.method.name())))?;
        out.graph = Some(Arc::new(graph_attack(g, spec, rng)?.graph));
    } else {
        out.input = corrupt(&sample.input, spec, rng)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
