use serde::{Deserialize, Serialize};

use super::{Activation, FragmentKind, GraphData, LogitNoise};
use crate::error::{ensure, Result};
use crate::numerics::{matmul, Tensor};

/// Negative slope of the leaky-ReLU applied to attention logits.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Single-head graph attention layer.
///
/// `v_i = h_i omega + xi_i`, `u_ij = attn . (v_i || v_j) + zeta_ij` for every
/// `j` in the closed neighborhood of `i`, `alpha_ij = softmax_j(leaky(u_ij))`
/// and `h'_i = phi(sum_j alpha_ij v_j)`. With `literal_self_aggregation` the
/// sum runs over `alpha_ij v_i` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gat {
    /// `d_in x d_out`
    pub omega: Tensor,
    /// `2 d_out`
    pub attn: Tensor,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub literal_self_aggregation: bool,
}

/// Intermediate values of one GAT evaluation, in directed-edge order
/// (node `i` ascending, then neighbor `j` ascending).
#[derive(Debug, Clone)]
pub struct GatInternals {
    /// `N x d_out` transformed features.
    pub v: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub u: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `N x d_out` aggregate before the output activation.
    pub aggregate: Vec<f64>,
}

#[inline]
pub(crate) fn leaky(u: f64) -> f64 {
    if u >= 0.0 {
        u
    } else {
        ATTENTION_SLOPE * u
    }
}

impl Gat {
    pub fn d_in(&self) -> usize {
        self.omega.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.omega.shape()[1]
    }

    pub(crate) fn directed_pairs(graph: &GraphData) -> Vec<(usize, usize)> {
        (0..graph.num_nodes())
            .flat_map(|i| graph.neighborhood(i).iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn internals(
        &self,
        graph: &GraphData,
        h: &Tensor,
        node_noise: Option<(&[f64], f64)>,
        edge_noise: Option<(&[f64], f64)>,
    ) -> Result<GatInternals> {
        ensure!(
            h.rank() == 2 && h.shape()[1] == self.d_in() && h.shape()[0] == graph.num_nodes(),
            "gat expects {} x {} features, got {:?}",
            graph.num_nodes(),
            self.d_in(),
            h.shape()
        );
        ensure!(
            self.attn.len() == 2 * self.d_out(),
            "attention vector must have 2 d_out entries"
        );
        let (n, dout) = (graph.num_nodes(), self.d_out());
        let mut v = matmul(h.data(), self.omega.data(), n, self.d_in(), dout);
        if let Some((eps, sigma)) = node_noise {
            for (o, e) in v.iter_mut().zip(eps) {
                *o += sigma * e;
            }
        }
        let pairs = Self::directed_pairs(graph);
        let (a_left, a_right) = self.attn.data().split_at(dout);
        let mut u: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let vi = &v[i * dout..(i + 1) * dout];
                let vj = &v[j * dout..(j + 1) * dout];
                vi.iter().zip(a_left).map(|(a, b)| a * b).sum::<f64>()
                    + vj.iter().zip(a_right).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        if let Some((eps, sigma)) = edge_noise {
            for (o, e) in u.iter_mut().zip(eps) {
                *o += sigma * e;
            }
        }
        let mut alpha = vec![0.0; u.len()];
        let mut aggregate = vec![0.0; n * dout];
        let mut start = 0;
        for i in 0..n {
            let deg = graph.neighborhood(i).len();
            ensure!(deg >= 1, "node {i} has an empty neighborhood");
            let span = start..start + deg;
            let m = u[span.clone()]
                .iter()
                .map(|&x| leaky(x))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in span.clone() {
                alpha[e] = (leaky(u[e]) - m).exp();
                z += alpha[e];
            }
            let out = &mut aggregate[i * dout..(i + 1) * dout];
            for e in span {
                alpha[e] /= z;
                let src = if self.literal_self_aggregation { i } else { pairs[e].1 };
                for (o, x) in out.iter_mut().zip(&v[src * dout..(src + 1) * dout]) {
                    *o += alpha[e] * x;
                }
            }
            start += deg;
        }
        Ok(GatInternals {
            v,
            pairs,
            u,
            alpha,
            aggregate,
        })
    }

    pub fn forward(
        &self,
        graph: &GraphData,
        h: &Tensor,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        let (n, dout) = (graph.num_nodes(), self.d_out());
        let (internals, fragment) = match noise {
            None => (self.internals(graph, h, None, None)?, None),
            Some(mut nz) => {
                let e_node = nz.draw(n * dout)?;
                let e_edge = nz.draw(Self::directed_pairs(graph).len())?;
                let it = self.internals(
                    graph,
                    h,
                    Some((&e_node, nz.sigma)),
                    Some((&e_edge, nz.attn_sigma)),
                )?;
                let mut pairs = Vec::with_capacity(it.pairs.len() * 2 * dout);
                for &(i, j) in &it.pairs {
                    pairs.extend_from_slice(&it.v[i * dout..(i + 1) * dout]);
                    pairs.extend_from_slice(&it.v[j * dout..(j + 1) * dout]);
                }
                let frag = FragmentKind::Gat {
                    input: h.clone(),
                    eps_node: Tensor::from_vec(vec![n, dout], e_node)?,
                    pairs: Tensor::from_vec(vec![it.pairs.len(), 2 * dout], pairs)?,
                    eps_edge: e_edge,
                };
                (it, Some(frag))
            }
        };
        let act = self.activation;
        let out = internals.aggregate.iter().map(|&x| act.apply(x)).collect();
        Ok((Tensor::from_vec(vec![n, dout], out)?, fragment))
    }
}
