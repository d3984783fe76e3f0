use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Activation, FragmentKind, LogitNoise};
use crate::error::{ensure, Result};
use crate::numerics::{matmul, Tensor};

/// Undirected graph with node features, labels and train/test node masks.
///
/// Self-loops are implicit: `A~ = A + I` and `D~_ii = 1 + deg(i)`. Edges are
/// stored once as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphData {
    pub features: Tensor,
    edges: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
    /// Sorted closed neighborhoods (each includes the node itself).
    neighbors: Vec<Vec<usize>>,
}

impl GraphData {
    pub fn new(
        features: Tensor,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<usize>,
        classes: usize,
        train_nodes: Vec<usize>,
        test_nodes: Vec<usize>,
    ) -> Result<Self> {
        ensure!(features.rank() == 2, "node features must be |V| x d");
        let n = features.shape()[0];
        ensure!(labels.len() == n, "need one label per node");
        ensure!(
            labels.iter().all(|&l| l < classes),
            "node label out of range for {classes} classes"
        );
        ensure!(
            train_nodes.iter().chain(&test_nodes).all(|&i| i < n),
            "mask refers to a missing node"
        );
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            ensure!(a < n && b < n, "edge ({a}, {b}) refers to a missing node");
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let neighbors = closed_neighborhoods(n, &edges);
        Ok(GraphData {
            features,
            edges,
            labels,
            classes,
            train_nodes,
            test_nodes,
            neighbors,
        })
    }

    /// Same nodes, labels and masks with a new edge set.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        GraphData::new(
            self.features.clone(),
            edges,
            self.labels.clone(),
            self.classes,
            self.train_nodes.clone(),
            self.test_nodes.clone(),
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.features.shape()[0]
    }

    /// Undirected edges without self-loops.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Diagonal of `D~`.
    pub fn degree_tilde(&self) -> Vec<f64> {
        self.neighbors.iter().map(|nb| nb.len() as f64).collect()
    }

    /// Dense `A~` with unit diagonal.
    pub fn adjacency_tilde(&self) -> Tensor {
        let n = self.num_nodes();
        let mut a = Tensor::zeros(&[n, n]);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                a.data_mut()[i * n + j] = 1.0;
            }
        }
        a
    }

    /// Dense `D~^{-1/2} A~ D~^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.num_nodes();
        let deg = self.degree_tilde();
        let mut a = Tensor::zeros(&[n, n]);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                a.data_mut()[i * n + j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
        a
    }

    /// `D~^{-1/2} A~ D~^{-1/2} h` computed over neighborhoods.
    pub fn aggregate(&self, h: &Tensor) -> Result<Tensor> {
        let n = self.num_nodes();
        ensure!(
            h.rank() == 2 && h.shape()[0] == n,
            "aggregation expects a {n} x d matrix, got {:?}",
            h.shape()
        );
        let d = h.shape()[1];
        let deg = self.degree_tilde();
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let nb = &self.neighbors[i];
            ensure!(
                nb.binary_search(&i).is_ok(),
                "node {i} has no self-loop"
            );
            let row = out.row_mut(i);
            for &j in nb {
                let w = 1.0 / (deg[i] * deg[j]).sqrt();
                for (o, x) in row.iter_mut().zip(h.row(j)) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }
}

fn closed_neighborhoods(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut nb: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in edges {
        nb[a].push(b);
        nb[b].push(a);
    }
    nb.iter_mut().for_each(|v| v.sort_unstable());
    nb
}

/// Graph convolution `phi(D~^{-1/2} A~ D~^{-1/2} h theta + sigma * eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gcn {
    /// `d_in x d_out`
    pub weight: Tensor,
    #[serde(default)]
    pub activation: Activation,
}

impl Gcn {
    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(
        &self,
        graph: &GraphData,
        h: &Tensor,
        noise: Option<LogitNoise>,
    ) -> Result<(Tensor, Option<FragmentKind>)> {
        ensure!(
            h.rank() == 2 && h.shape()[1] == self.d_in(),
            "gcn expects |V| x {} features, got {:?}",
            self.d_in(),
            h.shape()
        );
        let xhat = graph.aggregate(h)?;
        let n = graph.num_nodes();
        let mut v = matmul(xhat.data(), self.weight.data(), n, self.d_in(), self.d_out());
        let fragment = match noise {
            None => None,
            Some(mut nz) => {
                let eps = nz.draw(v.len())?;
                for (o, e) in v.iter_mut().zip(&eps) {
                    *o += nz.sigma * e;
                }
                Some(FragmentKind::Gcn {
                    aggregated: xhat,
                    eps: Tensor::from_vec(vec![n, self.d_out()], eps)?,
                })
            }
        };
        let act = self.activation;
        v.iter_mut().for_each(|o| *o = act.apply(*o));
        Ok((Tensor::from_vec(vec![n, self.d_out()], v)?, fragment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> GraphData {
        GraphData::new(
            Tensor::from_vec(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap(),
            edges.iter().copied(),
            vec![0; n],
            1,
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn single_node_aggregation_is_identity() {
        let g = graph(1, &[]);
        assert_eq!(g.aggregate(&g.features).unwrap(), g.features);
    }

    #[test]
    fn two_node_path_entries_are_half() {
        let g = graph(2, &[(0, 1)]);
        assert_eq!(g.normalized_adjacency().data(), &[0.5; 4]);
        assert_eq!(g.degree_tilde(), vec![2.0, 2.0]);
    }

    #[test]
    fn duplicates_and_self_loops_collapse() {
        let g = graph(3, &[(0, 1), (1, 0), (2, 2), (0, 1)]);
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.adjacency_tilde().data()[2 * 3 + 2], 1.0);
    }

    #[test]
    fn identity_weights_return_aggregate() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let gcn = Gcn {
            weight: Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]),
            activation: Activation::Identity,
        };
        let (y, _) = gcn.forward(&g, &g.features, None).unwrap();
        let xhat = g.aggregate(&g.features).unwrap();
        for (a, b) in y.data().iter().zip(xhat.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let r = GraphData::new(Tensor::zeros(&[2, 1]), [(0, 5)], vec![0, 0], 1, vec![], vec![]);
        assert!(r.is_err());
    }
}
