//! Reference gradients: reverse-mode adjoints of the clean network, central
//! finite differences (optionally under frozen noise), and the cosine
//! similarity used to score estimates against them.

mod backward;

pub use backward::{layer_backward, spike_surrogate, SURROGATE_WIDTH};

use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::estimators::GradEstimate;
use crate::layers::{NoisePlan, Network, Sample, Target};
use crate::numerics::{Recording, Replay, RngStream, Tensor};
use crate::training::softmax;

/// Default relative finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Smallest absolute finite-difference step.
pub const FD_FLOOR: f64 = 1e-6;

/// Exact gradients of the mean batch loss of the deterministic network.
#[derive(Debug, Clone, PartialEq)]
pub struct BpGrad {
    pub loss: f64,
    /// `grads[l][p]` matches `net.layers[l].params()[p]`.
    pub grads: Vec<Vec<Tensor>>,
    /// `dL/dx` per sample, for the sample's own loss (not divided by the batch size).
    pub input_grads: Vec<Tensor>,
}

impl BpGrad {
    pub fn layer_flat(&self, layer: usize) -> Vec<f64> {
        flatten(&self.grads[layer])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| flatten(g)).collect()
    }
}

pub(crate) fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Loss of one sample and its gradient with respect to the final layer output.
pub fn loss_grad(net: &Network, output: &Tensor, sample: &Sample) -> Result<(f64, Tensor)> {
    let loss = net.loss(output, sample)?;
    let c = net.classes;
    let mut g = Tensor::zeros(output.shape());
    match &sample.target {
        Target::Class(label) => {
            let p = softmax(output.data());
            g.data_mut().copy_from_slice(&p);
            g.data_mut()[*label] -= 1.0;
        }
        Target::Nodes(nodes) => {
            let graph = sample.graph().expect("checked by loss");
            let w = 1.0 / nodes.len() as f64;
            for &i in nodes {
                let p = softmax(&output.data()[i * c..(i + 1) * c]);
                let row = &mut g.data_mut()[i * c..(i + 1) * c];
                for (k, (o, pk)) in row.iter_mut().zip(p).enumerate() {
                    *o += w * (pk - if k == graph.labels[i] { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Ok((loss, g))
}

/// Reverse-mode gradient of the mean loss over `batch` for the noise-free
/// network. Spiking layers use the rectangular surrogate and spike encoders
/// pass gradients straight through, so those results are approximate.
pub fn bp_grad(net: &Network, batch: &[Sample]) -> Result<BpGrad> {
    ensure!(!batch.is_empty(), "bp_grad needs a non-empty batch");
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<Tensor>> = net
        .layers
        .iter()
        .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    let mut input_grads = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for sample in batch {
        let acts = net.activations(sample)?;
        let (loss, mut g) = loss_grad(net, acts.last().expect("logits"), sample)?;
        total += loss;
        for (l, layer) in net.layers.iter().enumerate().rev() {
            let (gx, gp) = backward::layer_backward(layer, &acts[l], &acts[l + 1], &g, sample.graph())?;
            for (acc, p) in grads[l].iter_mut().zip(&gp) {
                acc.axpy(scale, p);
            }
            g = gx;
        }
        input_grads.push(g);
    }
    Ok(BpGrad {
        loss: total * scale,
        grads,
        input_grads,
    })
}

/// Noise draws recorded once per sample and replayed on every evaluation,
/// so that perturbed-parameter losses share the same randomness.
#[derive(Debug, Clone)]
pub struct FrozenNoise {
    pub plan: NoisePlan,
    /// `draws[b]` holds the blocks consumed by sample `b`'s forward.
    pub draws: Vec<Vec<Vec<f64>>>,
}

impl FrozenNoise {
    /// Records independent draws for every sample of `batch`.
    pub fn record(net: &Network, batch: &[Sample], plan: &NoisePlan, stream: &RngStream) -> Result<Self> {
        plan.validate(net)?;
        let draws = batch
            .iter()
            .enumerate()
            .map(|(b, s)| {
                let mut rng = stream.derive(&[b as u64]);
                let mut rec = Recording::new(&mut rng);
                net.forward_from(0, &s.input, s, plan, &mut rec)?;
                Ok(rec.blocks)
            })
            .collect::<Result<_>>()?;
        Ok(FrozenNoise {
            plan: plan.clone(),
            draws,
        })
    }

    /// Mean loss of `net` on `batch` under the recorded draws.
    pub fn batch_loss(&self, net: &Network, batch: &[Sample]) -> Result<f64> {
        ensure!(
            self.draws.len() == batch.len(),
            "frozen noise recorded for {} samples, batch has {}",
            self.draws.len(),
            batch.len()
        );
        let mut total = 0.0;
        for (s, blocks) in batch.iter().zip(&self.draws) {
            let mut replay = Replay::new(blocks, false);
            total += net.forward_from(0, &s.input, s, &self.plan, &mut replay)?.loss;
        }
        Ok(total / batch.len() as f64)
    }
}

fn clean_batch_loss(net: &Network, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += net.loss(&net.logits(s)?, s)?;
    }
    Ok(total / batch.len() as f64)
}

/// `(f(x + step) - f(x - step)) / (2 step)`.
pub(crate) fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, step: f64) -> Result<f64> {
    let up = f(x + step)?;
    let down = f(x - step)?;
    Ok((up - down) / (2.0 * step))
}

fn step_for(h: f64, theta: f64) -> f64 {
    (h * theta.abs()).max(FD_FLOOR)
}

/// Central-difference gradient of the mean batch loss with respect to every
/// parameter. Each coordinate moves by `max(h |theta|, FD_FLOOR)`. With
/// `frozen` both sides reuse the same noise draws.
pub fn fd_grad(net: &Network, batch: &[Sample], h: f64, frozen: Option<&FrozenNoise>) -> Result<Vec<Vec<Tensor>>> {
    let layers: Vec<usize> = (0..net.layers.len()).collect();
    fd_grad_layers(net, batch, h, frozen, &layers)
}

/// `fd_grad` restricted to `layers`; other layers get zero tensors.
pub fn fd_grad_layers(
    net: &Network,
    batch: &[Sample],
    h: f64,
    frozen: Option<&FrozenNoise>,
    layers: &[usize],
) -> Result<Vec<Vec<Tensor>>> {
    ensure!(h > 0.0 && h.is_finite(), "finite-difference step must be positive");
    ensure!(!batch.is_empty(), "fd_grad needs a non-empty batch");
    let eval = |n: &Network| -> Result<f64> {
        let v = match frozen {
            Some(f) => f.batch_loss(n, batch),
            None => clean_batch_loss(n, batch),
        };
        match v {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(Error::Oracle(format!("loss {v} under perturbation"))),
            Err(Error::Contract(m)) if m.contains("non-finite") => Err(Error::Oracle(m)),
            Err(e) => Err(e),
        }
    };
    let mut work = net.clone();
    let mut out: Vec<Vec<Tensor>> = net
        .layers
        .iter()
        .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    for &l in layers {
        let count = net.layers[l].params().len();
        for p in 0..count {
            for k in 0..net.layers[l].params()[p].len() {
                let theta = net.layers[l].params()[p].data()[k];
                out[l][p].data_mut()[k] = central_difference(
                    |v| {
                        work.layers[l].params_mut()[p].data_mut()[k] = v;
                        eval(&work)
                    },
                    theta,
                    step_for(h, theta),
                )?;
                work.layers[l].params_mut()[p].data_mut()[k] = theta;
            }
        }
    }
    Ok(out)
}

/// Central difference of the frozen-noise loss in the noise scale of `layer`.
pub fn fd_sigma_grad(net: &Network, batch: &[Sample], frozen: &FrozenNoise, layer: usize, h: f64) -> Result<f64> {
    ensure!(layer < frozen.plan.entries.len(), "layer {layer} out of range");
    let sigma = frozen.plan.entries[layer].sigma;
    let step = step_for(h, sigma);
    ensure!(step < sigma, "step {step} would make sigma non-positive");
    let mut f = frozen.clone();
    f.plan.entries[layer].sigma = sigma + step;
    let up = f.batch_loss(net, batch)?;
    f.plan.entries[layer].sigma = sigma - step;
    let down = f.batch_loss(net, batch)?;
    Ok((up - down) / (2.0 * step))
}

/// Cosine of the angle between two flat gradients. `degenerate` is set (and
/// `value` is 0) when either vector is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Similarity> {
    ensure!(
        a.len() == b.len(),
        "cannot compare gradients of lengths {} and {}",
        a.len(),
        b.len()
    );
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Similarity {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Similarity {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Per-layer agreement of one estimate with a reference gradient. Only
/// parameterized layers are listed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradComparison {
    pub label: String,
    pub copies: usize,
    pub layers: Vec<(usize, Similarity)>,
}

pub fn compare(label: &str, net: &Network, estimate: &GradEstimate, reference: &[Vec<Tensor>]) -> Result<GradComparison> {
    ensure!(
        reference.len() == net.layers.len() && estimate.grads.len() == net.layers.len(),
        "gradients do not cover every layer"
    );
    let layers = net
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_params())
        .map(|(i, _)| Ok((i, cosine_similarity(&estimate.layer_flat(i), &flatten(&reference[i]))?)))
        .collect::<Result<_>>()?;
    Ok(GradComparison {
        label: label.to_string(),
        copies: estimate.copies_used,
        layers,
    })
}

#[cfg(test)]
mod tests;
