use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{class_index, lines_with_offsets};
use crate::error::{ensure, Error, Result};
use crate::layers::GraphData;
use crate::numerics::{RngStream, Tensor};

/// Reads a graph from two text files. Each node line is `id f1 ... fd label`
/// and each edge line is `id id`; blank lines and `#` comments are ignored.
/// Ids are arbitrary tokens, numbered in order of appearance. Labels are
/// mapped to classes in sorted order (numeric when every label is an integer).
/// Duplicate and reversed edges collapse; self-loop lines are ignored since
/// `A~` already carries them. The returned graph has empty train/test masks.
pub fn load_edge_list(node_file: impl AsRef<Path>, edge_file: impl AsRef<Path>) -> Result<GraphData> {
    let nodes = fs::read_to_string(node_file)?;
    let edges = fs::read_to_string(edge_file)?;
    parse_edge_list(&nodes, &edges)
}

pub(crate) fn parse_edge_list(nodes: &str, edges: &str) -> Result<GraphData> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut dim = None;
    for (offset, line) in lines_with_offsets(nodes) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::format(offset, "node line needs an id, at least one feature and a label"));
        }
        let (id, rest) = (fields[0], &fields[1..]);
        let (label, feats) = rest.split_last().expect("at least two fields");
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::format(
                    offset,
                    format!("node {id} has {} features, expected {d}", feats.len()),
                ))
            }
            Some(_) => {}
        }
        for f in feats {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::format(offset, format!("node {id}: bad feature value {f:?}")))?;
            if !v.is_finite() {
                return Err(Error::format(offset, format!("node {id}: non-finite feature {f:?}")));
            }
            features.push(v);
        }
        if ids.insert(id, ids.len()).is_some() {
            return Err(Error::format(offset, format!("duplicate node id {id}")));
        }
        raw_labels.push(*label);
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::format(0, "node file lists no nodes"));
    }
    let mut pairs = Vec::new();
    for (offset, line) in lines_with_offsets(edges) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::format(offset, "edge line needs exactly two node ids"));
        }
        let lookup = |id: &str| {
            ids.get(id)
                .copied()
                .ok_or_else(|| Error::format(offset, format!("edge refers to unknown node id {id}")))
        };
        pairs.push((lookup(fields[0])?, lookup(fields[1])?));
    }
    let (labels, classes) = class_index(&raw_labels);
    let features = Tensor::from_vec(vec![n, dim.unwrap_or(0)], features)?;
    GraphData::new(features, pairs, labels, classes, Vec::new(), Vec::new())
}

/// Writes `graph` in the format read by [`load_edge_list`], using node
/// indices as ids and class indices as labels. Features are printed in
/// shortest round-trip form so a reload reproduces them bit for bit.
pub fn write_edge_list(graph: &GraphData, node_file: impl AsRef<Path>, edge_file: impl AsRef<Path>) -> Result<()> {
    let n = graph.num_nodes();
    let d = graph.features.shape()[1];
    let mut nodes = String::new();
    for i in 0..n {
        write!(nodes, "{i}").expect("writing to a String");
        for v in &graph.features.data()[i * d..(i + 1) * d] {
            write!(nodes, " {v:?}").expect("writing to a String");
        }
        writeln!(nodes, " {}", graph.labels[i]).expect("writing to a String");
    }
    let mut edges = String::new();
    for (a, b) in graph.edges() {
        writeln!(edges, "{a} {b}").expect("writing to a String");
    }
    fs::write(node_file, nodes)?;
    fs::write(edge_file, edges)?;
    Ok(())
}

/// Assigns masks: `train_per_class` random nodes of every class train, all
/// other nodes test. Classes with too few nodes keep at least one test node.
pub fn split_nodes(graph: &GraphData, train_per_class: usize, stream: &RngStream) -> Result<GraphData> {
    ensure!(train_per_class >= 1, "need at least one training node per class");
    let mut rng = stream.clone();
    let mut train = Vec::new();
    for c in 0..graph.classes {
        let mut members: Vec<usize> = (0..graph.num_nodes()).filter(|&i| graph.labels[i] == c).collect();
        rng.shuffle(&mut members);
        let take = train_per_class.min(members.len().saturating_sub(1));
        train.extend_from_slice(&members[..take]);
    }
    train.sort_unstable();
    let test = (0..graph.num_nodes()).filter(|i| train.binary_search(i).is_err()).collect();
    let mut out = graph.clone();
    out.train_nodes = train;
    out.test_nodes = test;
    Ok(out)
}
