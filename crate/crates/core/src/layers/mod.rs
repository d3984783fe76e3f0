//! Noisy forward passes for every supported architecture.
//!
//! Every parameterized layer can run in one of three noise modes:
//! `Off` (deterministic), `Logit` (Gaussian noise added to the pre-activation
//! output) or `Weight` (Gaussian noise added to every parameter entry). A
//! perturbed forward returns a [`TraceFragment`] holding exactly what the
//! matching likelihood-ratio estimator needs.

mod aux;
mod conv;
mod dense;
mod gat;
mod graph;
mod lif;
mod network;
mod rnn;

use serde::{Deserialize, Serialize};

pub use aux::{LastStep, OneHot, SpikeEncoder};
pub use conv::Conv2d;
pub use dense::Dense;
pub use gat::{Gat, GatInternals, ATTENTION_SLOPE};
pub use graph::{Gcn, GraphData};
pub use lif::{Lif, LifRun, DEFAULT_LEAK, DEFAULT_STEPS, DEFAULT_THRESHOLD};
pub use network::{network_forward, ForwardTrace, LayerSpec, Network, Sample, Target};
pub use rnn::{RnnCell, RnnKind, RnnRun};

pub(crate) use conv::correlate_plane;

use crate::error::{ensure, Result};
use crate::numerics::{NoiseSource, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation's output `y = phi(v)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Off,
    Logit,
    Weight,
}

/// Injection settings for one layer. `sigma` is the noise standard deviation
/// (the covariance is `sigma^2 I`). `attn_sigma` is the separate magnitude of
/// the attention-logit noise in GAT layers and defaults to `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    #[serde(default)]
    pub mode: NoiseMode,
    pub sigma: f64,
    #[serde(default)]
    pub attn_sigma: Option<f64>,
    #[serde(default)]
    pub trainable_sigma: bool,
}

impl NoiseEntry {
    pub const DEFAULT_LOGIT_SIGMA: f64 = 1e-1;
    pub const DEFAULT_WEIGHT_SIGMA: f64 = 1e-3;

    pub fn off() -> Self {
        NoiseEntry {
            mode: NoiseMode::Off,
            sigma: Self::DEFAULT_LOGIT_SIGMA,
            attn_sigma: None,
            trainable_sigma: false,
        }
    }

    pub fn logit(sigma: f64) -> Self {
        NoiseEntry {
            mode: NoiseMode::Logit,
            sigma,
            attn_sigma: None,
            trainable_sigma: false,
        }
    }

    pub fn weight(sigma: f64) -> Self {
        NoiseEntry {
            mode: NoiseMode::Weight,
            sigma,
            attn_sigma: None,
            trainable_sigma: false,
        }
    }

    pub fn attn_sigma(&self) -> f64 {
        self.attn_sigma.unwrap_or(self.sigma)
    }

    pub fn is_on(&self) -> bool {
        self.mode != NoiseMode::Off
    }

    fn validate(&self, layer: usize) -> Result<()> {
        if self.is_on() {
            ensure!(
                self.sigma > 0.0 && self.sigma.is_finite(),
                "layer {layer}: sigma must be positive, got {}",
                self.sigma
            );
            ensure!(
                self.attn_sigma() > 0.0 && self.attn_sigma().is_finite(),
                "layer {layer}: attention sigma must be positive"
            );
        }
        Ok(())
    }
}

/// Per-layer noise settings for a single noisy forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub entries: Vec<NoiseEntry>,
}

impl NoisePlan {
    pub fn off(layers: usize) -> Self {
        NoisePlan {
            entries: vec![NoiseEntry::off(); layers],
        }
    }

    /// A plan that perturbs only `layer` with `entry`.
    pub fn only(layers: usize, layer: usize, entry: NoiseEntry) -> Self {
        let mut plan = Self::off(layers);
        plan.entries[layer] = entry;
        plan
    }

    /// Logit noise of magnitude `sigma` on every parameterized layer.
    pub fn logit_all(net: &Network, sigma: f64) -> Self {
        Self::each(net, |_, _| NoiseEntry::logit(sigma))
    }

    /// Weight noise of magnitude `sigma` on every parameterized layer.
    pub fn weight_all(net: &Network, sigma: f64) -> Self {
        Self::each(net, |_, _| NoiseEntry::weight(sigma))
    }

    /// Weight noise on the first two convolution layers and logit noise on
    /// every other parameterized layer, at the default magnitudes. Without
    /// convolutions this is plain logit noise.
    pub fn hybrid(net: &Network) -> Self {
        let convs: Vec<usize> = net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv2d(_)))
            .map(|(i, _)| i)
            .take(2)
            .collect();
        Self::each(net, |i, _| {
            if convs.contains(&i) {
                NoiseEntry::weight(NoiseEntry::DEFAULT_WEIGHT_SIGMA)
            } else {
                NoiseEntry::logit(NoiseEntry::DEFAULT_LOGIT_SIGMA)
            }
        })
    }

    fn each(net: &Network, f: impl Fn(usize, &Layer) -> NoiseEntry) -> Self {
        NoisePlan {
            entries: net
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| if l.has_params() { f(i, l) } else { NoiseEntry::off() })
                .collect(),
        }
    }

    pub fn perturbed_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_on())
            .map(|(i, _)| i)
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        ensure!(
            self.entries.len() == net.layers.len(),
            "noise plan has {} entries for {} layers",
            self.entries.len(),
            net.layers.len()
        );
        for (i, (e, layer)) in self.entries.iter().zip(&net.layers).enumerate() {
            e.validate(i)?;
            if e.is_on() {
                ensure!(
                    layer.has_params(),
                    "layer {i} has no parameters and cannot be perturbed"
                );
            }
        }
        Ok(())
    }
}

/// Logit-noise request handed to a layer's forward.
pub struct LogitNoise<'a> {
    pub sigma: f64,
    pub attn_sigma: f64,
    pub source: &'a mut dyn NoiseSource,
}

impl LogitNoise<'_> {
    pub(crate) fn draw(&mut self, n: usize) -> Result<Vec<f64>> {
        self.source.gaussian(n)
    }
}

/// Estimator inputs recorded by one perturbed layer in one forward.
#[derive(Debug, Clone, PartialEq)]
pub enum FragmentKind {
    /// Weight-mode noise: one draw tensor per parameter, in `params()` order.
    Weight { eps: Vec<Tensor> },
    Dense { input: Tensor, eps: Tensor },
    Conv { input: Tensor, eps: Tensor },
    /// `h_prev` row t is the hidden state fed into step t (row 0 is h_0).
    Rnn {
        h_prev: Tensor,
        input: Tensor,
        eps_hh: Tensor,
        eps_xh: Tensor,
    },
    Gcn { aggregated: Tensor, eps: Tensor },
    /// `pairs` row e is the concatenation `(v_i || v_j)` for directed edge e.
    Gat {
        input: Tensor,
        eps_node: Tensor,
        pairs: Tensor,
        eps_edge: Vec<f64>,
    },
    /// `input` row t is the spike vector x^{t} feeding the layer at step t.
    Lif { input: Tensor, eps: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFragment {
    pub layer: usize,
    pub mode: NoiseMode,
    pub sigma: f64,
    pub attn_sigma: f64,
    pub kind: FragmentKind,
}

impl TraceFragment {
    /// All standard-normal draws of this fragment, in draw order.
    pub fn all_eps(&self) -> Vec<&[f64]> {
        match &self.kind {
            FragmentKind::Weight { eps } => eps.iter().map(Tensor::data).collect(),
            FragmentKind::Dense { eps, .. }
            | FragmentKind::Conv { eps, .. }
            | FragmentKind::Gcn { eps, .. }
            | FragmentKind::Lif { eps, .. } => vec![eps.data()],
            FragmentKind::Rnn { eps_hh, eps_xh, .. } => vec![eps_hh.data(), eps_xh.data()],
            FragmentKind::Gat {
                eps_node, eps_edge, ..
            } => vec![eps_node.data(), eps_edge.as_slice()],
        }
    }
}

/// One network layer. Parameter-free layers (`SpikeEncoder`, `LastStep`,
/// `OneHot`) only reshape or encode their input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Rnn(RnnCell),
    Gcn(Gcn),
    Gat(Gat),
    Lif(Lif),
    SpikeEncoder(SpikeEncoder),
    LastStep(LastStep),
    OneHot(OneHot),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Rnn(_) => "rnn",
            Layer::Gcn(_) => "gcn",
            Layer::Gat(_) => "gat",
            Layer::Lif(_) => "lif",
            Layer::SpikeEncoder(_) => "spike_encoder",
            Layer::LastStep(_) => "last_step",
            Layer::OneHot(_) => "one_hot",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::Rnn(l) => vec![&l.w_hh, &l.w_xh, &l.b_hh, &l.b_xh],
            Layer::Gcn(l) => vec![&l.weight],
            Layer::Gat(l) => vec![&l.omega, &l.attn],
            Layer::Lif(l) => vec![&l.weight],
            Layer::SpikeEncoder(_) | Layer::LastStep(_) | Layer::OneHot(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Rnn(l) => vec![&mut l.w_hh, &mut l.w_xh, &mut l.b_hh, &mut l.b_xh],
            Layer::Gcn(l) => vec![&mut l.weight],
            Layer::Gat(l) => vec![&mut l.omega, &mut l.attn],
            Layer::Lif(l) => vec![&mut l.weight],
            Layer::SpikeEncoder(_) | Layer::LastStep(_) | Layer::OneHot(_) => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        !self.params().is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Copy of this layer with every parameter entry shifted by `sigma * eps`.
    pub fn perturbed(&self, sigma: f64, source: &mut dyn NoiseSource) -> Result<(Layer, Vec<Tensor>)> {
        let mut out = self.clone();
        let mut draws = Vec::new();
        for p in out.params_mut() {
            let eps = source.gaussian(p.len())?;
            for (w, e) in p.data_mut().iter_mut().zip(&eps) {
                *w += sigma * e;
            }
            draws.push(Tensor::from_vec(p.shape().to_vec(), eps)?);
        }
        Ok((out, draws))
    }

    /// Noisy forward of one layer under `entry`.
    pub fn forward(
        &self,
        input: &Tensor,
        graph: Option<&GraphData>,
        entry: &NoiseEntry,
        source: &mut dyn NoiseSource,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        match entry.mode {
            NoiseMode::Off => self.forward_logit(input, graph, None),
            NoiseMode::Weight => {
                let (noisy, eps) = self.perturbed(entry.sigma, source)?;
                let (out, _) = noisy.forward_logit(input, graph, None)?;
                Ok((out, Some(FragmentKind::Weight { eps })))
            }
            NoiseMode::Logit => self.forward_logit(
                input,
                graph,
                Some(LogitNoise {
                    sigma: entry.sigma,
                    attn_sigma: entry.attn_sigma(),
                    source,
                }),
            ),
        }
    }

    /// Deterministic forward.
    pub fn forward_clean(&self, input: &Tensor, graph: Option<&GraphData>) -> Result<Tensor> {
        Ok(self.forward_logit(input, graph, None)?.0)
    }

    fn forward_logit(
        &self,
        input: &Tensor,
        graph: Option<&GraphData>,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        let need_graph = || {
            graph.ok_or_else(|| crate::Error::contract("graph layer evaluated without a graph"))
        };
        match self {
            Layer::Dense(l) => l.forward(input, noise),
            Layer::Conv2d(l) => l.forward(input, noise),
            Layer::Rnn(l) => l.forward(input, noise),
            Layer::Gcn(l) => l.forward(need_graph()?, input, noise),
            Layer::Gat(l) => l.forward(need_graph()?, input, noise),
            Layer::Lif(l) => l.forward(input, noise),
            Layer::SpikeEncoder(l) => Ok((l.forward(input)?, None)),
            Layer::LastStep(l) => Ok((l.forward(input)?, None)),
            Layer::OneHot(l) => Ok((l.forward(input)?, None)),
        }
    }
}
