use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    Activation, Conv2d, Dense, Gat, Gcn, GraphData, LastStep, Layer, Lif, NoisePlan, OneHot,
    RnnCell, RnnKind, SpikeEncoder, TraceFragment, DEFAULT_LEAK, DEFAULT_THRESHOLD,
};
use crate::error::{ensure, Error, Result};
use crate::numerics::{NoiseSource, RngStream, Tensor};
use crate::training::cross_entropy_loss;

/// Supervision attached to one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Single class label for a whole input.
    Class(usize),
    /// Node classification: the loss is the mean over `nodes`, using the
    /// labels stored in the sample's graph.
    Nodes(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub target: Target,
    pub graph: Option<Arc<GraphData>>,
}

impl Sample {
    pub fn class(input: Tensor, label: usize) -> Self {
        Sample {
            input,
            target: Target::Class(label),
            graph: None,
        }
    }

    /// Node-classification sample over `nodes` of `graph`.
    pub fn nodes(graph: Arc<GraphData>, nodes: Vec<usize>) -> Self {
        Sample {
            input: graph.features.clone(),
            target: Target::Nodes(nodes),
            graph: Some(graph),
        }
    }

    pub fn graph(&self) -> Option<&GraphData> {
        self.graph.as_deref()
    }
}

/// Output of one (possibly noisy) forward: the recorded fragments of every
/// perturbed layer and the scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub fragments: Vec<TraceFragment>,
    pub loss: f64,
}

/// Ordered layers followed by a softmax cross-entropy head over `classes`
/// logits produced by the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub classes: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, classes: usize) -> Result<Self> {
        ensure!(!layers.is_empty(), "network needs at least one layer");
        ensure!(classes >= 2, "classification head needs at least two classes");
        Ok(Network { layers, classes })
    }

    /// Builds a network from layer specs with parameters drawn from `seed`.
    pub fn from_specs(specs: &[LayerSpec], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0x1417);
        let layers = specs
            .iter()
            .map(|s| s.build(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers, classes)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Inputs of every layer in a clean forward: entry `l` feeds layer `l` and
    /// the last entry holds the logits.
    pub fn activations(&self, sample: &Sample) -> Result<Vec<Tensor>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(sample.input.clone());
        for layer in &self.layers {
            let next = layer.forward_clean(acts.last().unwrap(), sample.graph())?;
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn logits(&self, sample: &Sample) -> Result<Tensor> {
        let mut x = sample.input.clone();
        for layer in &self.layers {
            x = layer.forward_clean(&x, sample.graph())?;
        }
        Ok(x)
    }

    /// Predicted class per scored item: one entry for a class target, one per
    /// listed node for a node target.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        let logits = self.logits(sample)?;
        match &sample.target {
            Target::Class(_) => {
                self.check_logits(&logits, 1)?;
                Ok(vec![logits.argmax()])
            }
            Target::Nodes(nodes) => {
                let n = logits.len() / self.classes.max(1);
                self.check_logits(&logits, n)?;
                Ok(nodes
                    .iter()
                    .map(|&i| crate::numerics::argmax(logits.row(i)))
                    .collect())
            }
        }
    }

    fn check_logits(&self, logits: &Tensor, rows: usize) -> Result<()> {
        ensure!(
            logits.len() == rows * self.classes,
            "head expects {rows} x {} logits, got shape {:?}",
            self.classes,
            logits.shape()
        );
        Ok(())
    }

    /// Cross-entropy of the final layer output against the sample's target.
    pub fn loss(&self, logits: &Tensor, sample: &Sample) -> Result<f64> {
        match &sample.target {
            Target::Class(label) => {
                self.check_logits(logits, 1)?;
                cross_entropy_loss(logits.data(), *label)
            }
            Target::Nodes(nodes) => {
                let g = sample
                    .graph()
                    .ok_or_else(|| Error::contract("node target without a graph"))?;
                ensure!(!nodes.is_empty(), "node target lists no nodes");
                self.check_logits(logits, g.num_nodes())?;
                let c = self.classes;
                let mut total = 0.0;
                for &i in nodes {
                    ensure!(i < g.num_nodes(), "target node {i} out of range");
                    total += cross_entropy_loss(&logits.data()[i * c..(i + 1) * c], g.labels[i])?;
                }
                Ok(total / nodes.len() as f64)
            }
        }
    }

    /// Runs layers `start..` on `input` (the clean activation feeding layer
    /// `start`) under `plan`. Layers before `start` must be unperturbed.
    pub fn forward_from(
        &self,
        start: usize,
        input: &Tensor,
        sample: &Sample,
        plan: &NoisePlan,
        source: &mut dyn NoiseSource,
    ) -> Result<ForwardTrace> {
        self.forward_with(start, input, sample, plan, source, &[])
    }

    /// `forward_from` with some layers replaced: `overrides[l]`, when present,
    /// runs instead of layer `l`.
    pub(crate) fn forward_with(
        &self,
        start: usize,
        input: &Tensor,
        sample: &Sample,
        plan: &NoisePlan,
        source: &mut dyn NoiseSource,
        overrides: &[Option<Layer>],
    ) -> Result<ForwardTrace> {
        ensure!(
            plan.entries.len() == self.layers.len(),
            "noise plan has {} entries for {} layers",
            plan.entries.len(),
            self.layers.len()
        );
        ensure!(
            plan.entries[..start].iter().all(|e| !e.is_on()),
            "cannot start a forward after a perturbed layer"
        );
        let mut fragments = Vec::new();
        let mut x = input.clone();
        for (l, (layer, entry)) in self.layers.iter().zip(&plan.entries).enumerate().skip(start) {
            let layer = overrides.get(l).and_then(Option::as_ref).unwrap_or(layer);
            let (next, frag) = layer.forward(&x, sample.graph(), entry, source)?;
            if let Some(kind) = frag {
                fragments.push(TraceFragment {
                    layer: l,
                    mode: entry.mode,
                    sigma: entry.sigma,
                    attn_sigma: entry.attn_sigma(),
                    kind,
                });
            }
            x = next;
        }
        let loss = self.loss(&x, sample)?;
        ensure!(loss.is_finite(), "forward produced a non-finite loss");
        Ok(ForwardTrace { fragments, loss })
    }
}

/// Full noisy forward of `net` on one sample.
pub fn network_forward(
    net: &Network,
    sample: &Sample,
    plan: &NoisePlan,
    source: &mut dyn NoiseSource,
) -> Result<ForwardTrace> {
    plan.validate(net)?;
    net.forward_from(0, &sample.input, sample, plan, source)
}

fn default_scale() -> f64 {
    1.0
}

fn default_leak() -> f64 {
    DEFAULT_LEAK
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_steps() -> usize {
    super::DEFAULT_STEPS
}

/// Configuration-side description of a layer. Weights are drawn uniformly
/// from `+-scale * sqrt(6 / (fan_in + fan_out))`; recurrent cells use
/// `+-scale / sqrt(d_h)`; biases start at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        d_in: usize,
        d_out: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "default_scale")]
        init_scale: f64,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "default_scale")]
        init_scale: f64,
    },
    Rnn {
        kind: RnnKind,
        d_x: usize,
        d_h: usize,
        #[serde(default = "default_scale")]
        init_scale: f64,
    },
    Gcn {
        d_in: usize,
        d_out: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "default_scale")]
        init_scale: f64,
    },
    Gat {
        d_in: usize,
        d_out: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        literal_self_aggregation: bool,
        #[serde(default = "default_scale")]
        init_scale: f64,
    },
    Lif {
        d_in: usize,
        d_out: usize,
        #[serde(default = "default_leak")]
        leak: f64,
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_scale")]
        init_scale: f64,
    },
    SpikeEncoder {
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default)]
        seed: u64,
    },
    LastStep,
    OneHot {
        vocab: usize,
    },
}

fn uniform(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| (2.0 * rng.next_uniform() - 1.0) * bound).collect();
    Tensor::from_vec(shape.to_vec(), v).expect("shape and length agree")
}

fn glorot(fan_in: usize, fan_out: usize, scale: f64) -> f64 {
    scale * (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl LayerSpec {
    pub fn build(&self, rng: &mut RngStream) -> Result<Layer> {
        let positive = |dims: &[usize]| -> Result<()> {
            ensure!(dims.iter().all(|&d| d > 0), "layer extents must be positive: {dims:?}");
            Ok(())
        };
        Ok(match *self {
            LayerSpec::Dense {
                d_in,
                d_out,
                activation,
                init_scale,
            } => {
                positive(&[d_in, d_out])?;
                let w = uniform(rng, &[d_out, d_in], glorot(d_in, d_out, init_scale));
                Layer::Dense(Dense::new(w, Tensor::zeros(&[d_out]), activation)?)
            }
            LayerSpec::Conv2d {
                c_in,
                c_out,
                kernel,
                activation,
                init_scale,
            } => {
                positive(&[c_in, c_out, kernel])?;
                let area = kernel * kernel;
                let bound = glorot(c_in * area, c_out * area, init_scale);
                let w = uniform(rng, &[c_out, c_in, kernel, kernel], bound);
                Layer::Conv2d(Conv2d::new(w, Tensor::zeros(&[c_out]), activation)?)
            }
            LayerSpec::Rnn {
                kind,
                d_x,
                d_h,
                init_scale,
            } => {
                positive(&[d_x, d_h])?;
                let rows = kind.gates() * d_h;
                let bound = init_scale / (d_h as f64).sqrt();
                let w_hh = uniform(rng, &[rows, d_h], bound);
                let w_xh = uniform(rng, &[rows, d_x], bound);
                Layer::Rnn(RnnCell::new(
                    kind,
                    w_hh,
                    w_xh,
                    Tensor::zeros(&[rows]),
                    Tensor::zeros(&[rows]),
                )?)
            }
            LayerSpec::Gcn {
                d_in,
                d_out,
                activation,
                init_scale,
            } => {
                positive(&[d_in, d_out])?;
                Layer::Gcn(Gcn {
                    weight: uniform(rng, &[d_in, d_out], glorot(d_in, d_out, init_scale)),
                    activation,
                })
            }
            LayerSpec::Gat {
                d_in,
                d_out,
                activation,
                literal_self_aggregation,
                init_scale,
            } => {
                positive(&[d_in, d_out])?;
                Layer::Gat(Gat {
                    omega: uniform(rng, &[d_in, d_out], glorot(d_in, d_out, init_scale)),
                    attn: uniform(rng, &[2 * d_out], glorot(2 * d_out, 1, init_scale)),
                    activation,
                    literal_self_aggregation,
                })
            }
            LayerSpec::Lif {
                d_in,
                d_out,
                leak,
                threshold,
                init_scale,
            } => {
                positive(&[d_in, d_out])?;
                let w = uniform(rng, &[d_out, d_in], glorot(d_in, d_out, init_scale));
                Layer::Lif(Lif::new(w, leak, threshold)?)
            }
            LayerSpec::SpikeEncoder { steps, seed } => {
                positive(&[steps])?;
                Layer::SpikeEncoder(SpikeEncoder { steps, seed })
            }
            LayerSpec::LastStep => Layer::LastStep(LastStep {}),
            LayerSpec::OneHot { vocab } => {
                positive(&[vocab])?;
                Layer::OneHot(OneHot { vocab })
            }
        })
    }
}
