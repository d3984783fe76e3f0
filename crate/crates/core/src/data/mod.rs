//! Dataset ingestion and synthetic fixtures.
//!
//! Image sets come from big-endian IDX files, graphs from a node file plus an
//! edge list, and token sequences from a whitespace-separated text file.
//! Token index 0 is reserved for masking and 1 for out-of-vocabulary words.

mod graph;
mod idx;
mod tokens;

use std::sync::Arc;

pub use graph::{load_edge_list, split_nodes, write_edge_list};
pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use tokens::{load_token_csv, write_token_file, OOV_TOKEN};

use crate::error::{ensure, Result};
use crate::layers::{GraphData, Sample, Target};
use crate::numerics::{RngStream, Tensor};

/// Labelled samples over `classes` classes. `vocab[i]` is the word with
/// token index `i + 2` for token datasets and empty otherwise.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub vocab: Vec<String>,
}

/// Disjoint training and test samples.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize) -> Result<Self> {
        for s in &samples {
            if let Target::Class(c) = s.target {
                ensure!(c < classes, "label {c} out of range for {classes} classes");
            }
        }
        Ok(Dataset {
            samples,
            classes,
            vocab: Vec::new(),
        })
    }

    /// Node classification on one graph: a training sample over the graph's
    /// training nodes and a test sample over its test nodes.
    pub fn from_graph(graph: GraphData) -> Result<Split> {
        ensure!(
            !graph.train_nodes.is_empty() && !graph.test_nodes.is_empty(),
            "graph needs non-empty training and test node sets"
        );
        let (train, test) = (graph.train_nodes.clone(), graph.test_nodes.clone());
        let g = Arc::new(graph);
        Ok(Split {
            train: vec![Sample::nodes(g.clone(), train)],
            test: vec![Sample::nodes(g, test)],
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .filter_map(|s| match s.target {
                Target::Class(c) => Some(c),
                Target::Nodes(_) => None,
            })
            .collect()
    }

    /// Keeps samples whose label is in `keep` and relabels them `0..keep.len()`
    /// in the order given.
    pub fn select_classes(&self, keep: &[usize]) -> Result<Dataset> {
        ensure!(keep.len() >= 2, "need at least two classes");
        let samples = self
            .samples
            .iter()
            .filter_map(|s| match s.target {
                Target::Class(c) => keep.iter().position(|&k| k == c).map(|new| Sample::class(s.input.clone(), new)),
                Target::Nodes(_) => None,
            })
            .collect();
        Dataset::new(samples, keep.len())
    }

    /// Shuffles with `stream` and holds out `test_fraction` of the samples
    /// (rounded, at least one of each side when possible).
    pub fn split(&self, test_fraction: f64, stream: &RngStream) -> Result<Split> {
        ensure!(
            (0.0..1.0).contains(&test_fraction),
            "test fraction must lie in [0, 1), got {test_fraction}"
        );
        let n = self.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        stream.clone().shuffle(&mut order);
        let mut n_test = (test_fraction * n as f64).round() as usize;
        if test_fraction > 0.0 && n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.samples[i].clone()).collect();
        Ok(Split {
            test: pick(&order[..n_test]),
            train: pick(&order[n_test..]),
        })
    }
}

/// Gaussian clusters with unit isotropic covariance centred on hypercube
/// vertices: coordinate `k` of class `c`'s centre is `+separation/2` if bit
/// `k` of `c` is set and `-separation/2` otherwise. Samples are class-major.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, stream: &RngStream) -> Result<Dataset> {
    ensure!(separation > 0.0, "separation must be positive, got {separation}");
    ensure!(dim >= 1, "blobs need at least one dimension");
    ensure!(
        classes >= 1 && (dim >= usize::BITS as usize || classes <= 1usize << dim),
        "{classes} classes do not fit on the vertices of a {dim}-cube"
    );
    let mut rng = stream.clone();
    let mut samples = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let centre: Vec<f64> = (0..dim)
            .map(|k| if k < 64 && (c >> k) & 1 == 1 { 0.5 } else { -0.5 } * separation)
            .collect();
        for _ in 0..per_class {
            let x = centre.iter().map(|m| m + rng.next_gaussian()).collect();
            samples.push(Sample::class(Tensor::from_vec(vec![dim], x)?, c));
        }
    }
    Dataset::new(samples, classes)
}

/// Non-blank, non-comment lines with the byte offset where each starts.
pub(crate) fn lines_with_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        let line = raw.trim();
        (!line.is_empty() && !line.starts_with('#')).then_some((start, line))
    })
}

/// Maps label strings to `0..k` in sorted order, numeric when every label
/// parses as an integer and lexicographic otherwise.
pub(crate) fn class_index(raw: &[&str]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<&str> = raw.to_vec();
    if distinct.iter().all(|l| l.parse::<i64>().is_ok()) {
        distinct.sort_by_key(|l| (l.parse::<i64>().expect("checked above"), *l));
    } else {
        distinct.sort_unstable();
    }
    distinct.dedup();
    let labels = raw.iter().map(|l| distinct.iter().position(|d| d == l).expect("present")).collect();
    (labels, distinct.len())
}

#[cfg(test)]
mod tests;
