//! Per-copy score terms: the factor `s` such that a layer's LR estimate is
//! `mean[L s]`. Each function adds `weight * s` into a flat buffer laid out
//! like the layer's parameters in `Layer::params()` order.

use crate::error::{ensure, Result};
use crate::layers::{correlate_plane, ForwardTrace, FragmentKind, TraceFragment};
use crate::numerics::{outer_acc, Tensor};

/// Shapes of the parameters scored by a fragment.
pub(crate) fn score_shapes(frag: &TraceFragment) -> Result<Vec<Vec<usize>>> {
    Ok(match &frag.kind {
        FragmentKind::Weight { eps } => eps.iter().map(|e| e.shape().to_vec()).collect(),
        FragmentKind::Dense { input, eps } => {
            vec![vec![eps.len(), input.len()], vec![eps.len()]]
        }
        FragmentKind::Conv { input, eps } => {
            let (ci, h, w) = dims3(input)?;
            let (co, ho, wo) = dims3(eps)?;
            ensure!(ho <= h && wo <= w, "noise field larger than the input plane");
            vec![vec![co, ci, h + 1 - ho, w + 1 - wo], vec![co]]
        }
        FragmentKind::Rnn {
            h_prev,
            input,
            eps_hh,
            ..
        } => {
            let rows = eps_hh.shape()[1];
            vec![
                vec![rows, h_prev.shape()[1]],
                vec![rows, input.shape()[1]],
                vec![rows],
                vec![rows],
            ]
        }
        FragmentKind::Gcn { aggregated, eps } => {
            vec![vec![aggregated.shape()[1], eps.shape()[1]]]
        }
        FragmentKind::Gat {
            input, eps_node, ..
        } => {
            let dout = eps_node.shape()[1];
            vec![vec![input.shape()[1], dout], vec![2 * dout]]
        }
        FragmentKind::Lif { input, eps } => vec![vec![eps.shape()[1], input.shape()[1]]],
    })
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    ensure!(t.rank() == 3, "expected a rank-3 field, got {:?}", t.shape());
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

pub(crate) fn score_len(frag: &TraceFragment) -> Result<usize> {
    Ok(score_shapes(frag)?
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum())
}

/// `out += weight * s(frag)`.
pub(crate) fn add_score(frag: &TraceFragment, weight: f64, out: &mut [f64]) -> Result<()> {
    ensure!(
        frag.sigma > 0.0 && frag.attn_sigma > 0.0,
        "noise magnitude must be positive"
    );
    if weight == 0.0 {
        return Ok(());
    }
    let k = weight / frag.sigma;
    match &frag.kind {
        FragmentKind::Weight { eps } => {
            let mut off = 0;
            for e in eps {
                for (o, v) in out[off..off + e.len()].iter_mut().zip(e.data()) {
                    *o += k * v;
                }
                off += e.len();
            }
        }
        FragmentKind::Dense { input, eps } => {
            let n = eps.len() * input.len();
            outer_acc(&mut out[..n], k, eps.data(), input.data());
            for (o, e) in out[n..n + eps.len()].iter_mut().zip(eps.data()) {
                *o += k * e;
            }
        }
        FragmentKind::Conv { input, eps } => {
            let (ci, h, w) = dims3(input)?;
            let (co, ho, wo) = dims3(eps)?;
            let area = (h + 1 - ho) * (w + 1 - wo);
            for o in 0..co {
                let field = &eps.data()[o * ho * wo..(o + 1) * ho * wo];
                for i in 0..ci {
                    let plane = &input.data()[i * h * w..(i + 1) * h * w];
                    let at = (o * ci + i) * area;
                    correlate_plane(plane, h, w, field, ho, wo, &mut out[at..at + area], k);
                }
            }
            let nb = co * ci * area;
            for o in 0..co {
                let s: f64 = eps.data()[o * ho * wo..(o + 1) * ho * wo].iter().sum();
                out[nb + o] += k * s;
            }
        }
        FragmentKind::Rnn {
            h_prev,
            input,
            eps_hh,
            eps_xh,
        } => {
            let steps = eps_hh.shape()[0];
            ensure!(
                h_prev.shape()[0] == steps && input.shape()[0] == steps && eps_xh.shape()[0] == steps,
                "recurrent fragment has inconsistent step counts"
            );
            let rows = eps_hh.shape()[1];
            let (dh, dx) = (h_prev.shape()[1], input.shape()[1]);
            let (a, rest) = out.split_at_mut(rows * dh);
            let (b, rest) = rest.split_at_mut(rows * dx);
            let (c, d) = rest.split_at_mut(rows);
            for t in 0..steps {
                outer_acc(a, k, eps_hh.row(t), h_prev.row(t));
                outer_acc(b, k, eps_xh.row(t), input.row(t));
                for r in 0..rows {
                    c[r] += k * eps_hh.row(t)[r];
                    d[r] += k * eps_xh.row(t)[r];
                }
            }
        }
        FragmentKind::Gcn { aggregated, eps } => {
            add_transposed_product(aggregated, eps, k, out);
        }
        FragmentKind::Gat {
            input,
            eps_node,
            pairs,
            eps_edge,
        } => {
            let n = add_transposed_product(input, eps_node, k, out);
            ensure!(
                pairs.shape()[0] == eps_edge.len(),
                "attention fragment is missing edge noise records"
            );
            let ka = weight / frag.attn_sigma;
            let width = pairs.shape()[1];
            let attn = &mut out[n..n + width];
            for (e, &z) in eps_edge.iter().enumerate() {
                for (o, v) in attn.iter_mut().zip(pairs.row(e)) {
                    *o += ka * z * v;
                }
            }
        }
        FragmentKind::Lif { input, eps } => {
            ensure!(
                input.shape()[0] == eps.shape()[0],
                "spiking fragment has inconsistent step counts"
            );
            let n = eps.shape()[1] * input.shape()[1];
            for t in 0..eps.shape()[0] {
                outer_acc(&mut out[..n], k, eps.row(t), input.row(t));
            }
        }
    }
    Ok(())
}

/// `out[..n*m] += k * a^T b` for `a: r x n`, `b: r x m`; returns `n * m`.
fn add_transposed_product(a: &Tensor, b: &Tensor, k: f64, out: &mut [f64]) -> usize {
    let (r, n, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    for p in 0..r {
        outer_acc(&mut out[..n * m], k, a.row(p), b.row(p));
    }
    n * m
}

/// Score of `sigma^2`: `(sum(eps^2) - n) / (2 sigma^2)` over the draws scaled
/// by `sigma`. GAT edge draws have their own magnitude and are excluded.
pub(crate) fn sigma_score(frag: &TraceFragment) -> Result<f64> {
    ensure!(frag.sigma > 0.0, "noise magnitude must be positive");
    let draws: Vec<&[f64]> = match &frag.kind {
        FragmentKind::Gat { eps_node, .. } => vec![eps_node.data()],
        _ => frag.all_eps(),
    };
    let (mut sq, mut n) = (0.0, 0usize);
    for d in draws {
        sq += d.iter().map(|e| e * e).sum::<f64>();
        n += d.len();
    }
    Ok((sq - n as f64) / (2.0 * frag.sigma * frag.sigma))
}

/// Monte Carlo estimate for one layer: mean and standard error per
/// parameter entry, reshaped to the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub grads: Vec<Tensor>,
    pub std_errors: Vec<Tensor>,
    pub copies: usize,
}

impl LayerGrad {
    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    pub fn flat_std_errors(&self) -> Vec<f64> {
        self.std_errors.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

pub(crate) fn split_flat(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::from_vec(s.clone(), flat[off..off + n].to_vec()).expect("shape and length agree");
            off += n;
            t
        })
        .collect()
}

fn mean_and_se(sum: &[f64], sum_sq: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            if n < 2 {
                0.0
            } else {
                ((q - nf * m * m).max(0.0) / (nf - 1.0) / nf).sqrt()
            }
        })
        .collect();
    (mean, se)
}

fn layer_fragments<'a>(traces: &'a [ForwardTrace], layer: usize) -> Result<Vec<(&'a TraceFragment, f64)>> {
    ensure!(!traces.is_empty(), "no traces to estimate from");
    traces
        .iter()
        .map(|t| {
            let f = t
                .fragments
                .iter()
                .find(|f| f.layer == layer)
                .ok_or_else(|| crate::Error::contract(format!("trace has no record for layer {layer}")))?;
            Ok((f, t.loss))
        })
        .collect()
}

fn check_uniform(frags: &[(&TraceFragment, f64)], accept: impl Fn(&FragmentKind) -> bool, what: &str) -> Result<()> {
    let first = frags[0].0;
    for (f, loss) in frags {
        ensure!(accept(&f.kind), "{what} estimator given a {:?}-mode record of another kind", f.mode);
        ensure!(f.mode == first.mode, "mixed noise modes across copies");
        ensure!(
            f.sigma == first.sigma && f.attn_sigma == first.attn_sigma,
            "mixed noise magnitudes across copies"
        );
        ensure!(loss.is_finite(), "non-finite loss in a trace");
    }
    let shapes = score_shapes(first)?;
    for (f, _) in frags {
        ensure!(score_shapes(f)? == shapes, "record shapes differ across copies");
    }
    Ok(())
}

/// Plain per-copy average `mean[L s]`, each trace treated as one copy.
fn plain_estimate(frags: &[(&TraceFragment, f64)]) -> Result<LayerGrad> {
    let shapes = score_shapes(frags[0].0)?;
    let len = score_len(frags[0].0)?;
    let mut sum = vec![0.0; len];
    let mut sum_sq = vec![0.0; len];
    let mut buf = vec![0.0; len];
    for (f, loss) in frags {
        buf.iter_mut().for_each(|v| *v = 0.0);
        add_score(f, *loss, &mut buf)?;
        for ((s, q), v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&buf) {
            *s += v;
            *q += v * v;
        }
    }
    let (mean, se) = mean_and_se(&sum, &sum_sq, frags.len());
    Ok(LayerGrad {
        grads: split_flat(&mean, &shapes),
        std_errors: split_flat(&se, &shapes),
        copies: frags.len(),
    })
}

/// Dense logit-noise estimate: `grad W = mean[L (eps / sigma) x^T]`,
/// `grad b = mean[L eps / sigma]`.
pub fn lr_dense_grad(traces: &[ForwardTrace], layer: usize) -> Result<LayerGrad> {
    let frags = layer_fragments(traces, layer)?;
    check_uniform(&frags, |k| matches!(k, FragmentKind::Dense { .. }), "dense")?;
    plain_estimate(&frags)
}

/// Convolution logit-noise estimate: kernel slice `(o, i)` is
/// `mean[(L / sigma) x^i correlated with eps^o]`; bias `mean[(L / sigma) sum eps^o]`.
pub fn lr_conv_grad(traces: &[ForwardTrace], layer: usize) -> Result<LayerGrad> {
    let frags = layer_fragments(traces, layer)?;
    check_uniform(&frags, |k| matches!(k, FragmentKind::Conv { .. }), "convolution")?;
    plain_estimate(&frags)
}

/// Weight-noise estimate `mean[L eps / sigma]` for every perturbed entry.
pub fn lr_weight_perturb_grad(traces: &[ForwardTrace], layer: usize) -> Result<LayerGrad> {
    let frags = layer_fragments(traces, layer)?;
    check_uniform(&frags, |k| matches!(k, FragmentKind::Weight { .. }), "weight-perturbation")?;
    plain_estimate(&frags)
}

/// Time-summed estimate for a recurrent cell (`W_hh, W_xh, b_hh, b_xh`) or a
/// spiking layer (`W`).
pub fn lr_recurrent_grad(traces: &[ForwardTrace], layer: usize) -> Result<LayerGrad> {
    let frags = layer_fragments(traces, layer)?;
    check_uniform(
        &frags,
        |k| matches!(k, FragmentKind::Rnn { .. } | FragmentKind::Lif { .. }),
        "recurrent",
    )?;
    plain_estimate(&frags)
}

/// Graph convolution estimate `mean[(L / sigma) X^T eps]`.
pub fn lr_gcn_grad(traces: &[ForwardTrace], layer: usize) -> Result<LayerGrad> {
    let frags = layer_fragments(traces, layer)?;
    check_uniform(&frags, |k| matches!(k, FragmentKind::Gcn { .. }), "graph convolution")?;
    plain_estimate(&frags)
}

/// Graph attention estimate: `(grad omega, grad attn)`.
pub fn lr_gat_grad(traces: &[ForwardTrace], layer: usize) -> Result<LayerGrad> {
    let frags = layer_fragments(traces, layer)?;
    check_uniform(&frags, |k| matches!(k, FragmentKind::Gat { .. }), "graph attention")?;
    plain_estimate(&frags)
}

/// Estimate of `dE[L]/d(sigma^2)` for one layer, with its standard error.
pub fn lr_sigma_grad(traces: &[ForwardTrace], layer: usize) -> Result<(f64, f64)> {
    let frags = layer_fragments(traces, layer)?;
    check_uniform(&frags, |_| true, "noise-magnitude")?;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for (f, loss) in &frags {
        let v = loss * sigma_score(f)?;
        sum += v;
        sum_sq += v * v;
    }
    let (m, se) = mean_and_se(&[sum], &[sum_sq], frags.len());
    Ok((m[0], se[0]))
}

