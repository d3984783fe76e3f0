use rand::seq::index::sample as sample_indices;

use super::{ratio_count, AttackMethod, AttackSpec};
use crate::error::{ensure, Result};
use crate::layers::GraphData;
use crate::numerics::RngStream;

/// A perturbed graph and the edge changes that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAttack {
    pub graph: GraphData,
    pub added: Vec<(usize, usize)>,
    pub removed: Vec<(usize, usize)>,
    /// Fewer edges than requested were available.
    pub capped: bool,
}

/// Picks up to `k` items uniformly without replacement, in their original order.
fn pick<T: Copy>(items: &[T], k: usize, rng: &mut RngStream) -> Vec<T> {
    let mut idx = sample_indices(rng, items.len(), k.min(items.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// Random edge injection or DICE on an undirected graph. The requested count
/// is `ceil(ratio |E|)`. DICE removes `floor(count / 2)` edges joining nodes
/// of the same label and adds the rest between nodes of different labels.
/// Self-loops are implicit in [`GraphData`] and never touched.
pub fn graph_attack(g: &GraphData, spec: &AttackSpec, rng: &mut RngStream) -> Result<GraphAttack> {
    spec.validate()?;
    ensure!(
        spec.method.is_graph(),
        "{} is not a graph attack",
        spec.method.name()
    );
    let n = g.num_nodes();
    let count = ratio_count(spec.ratio(), g.edges().len());
    let non_edges = |keep: &dyn Fn(usize, usize) -> bool| -> Vec<(usize, usize)> {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !g.has_edge(i, j) && keep(i, j))
            .collect()
    };
    let (added, removed, capped) = match spec.method {
        AttackMethod::RandomEdge => {
            let pool = non_edges(&|_, _| true);
            (pick(&pool, count, rng), Vec::new(), pool.len() < count)
        }
        AttackMethod::Dice => {
            let n_remove = count / 2;
            let n_add = count - n_remove;
            let intra: Vec<_> = g
                .edges()
                .iter()
                .copied()
                .filter(|&(i, j)| g.labels[i] == g.labels[j])
                .collect();
            let inter = non_edges(&|i, j| g.labels[i] != g.labels[j]);
            let capped = intra.len() < n_remove || inter.len() < n_add;
            (pick(&inter, n_add, rng), pick(&intra, n_remove, rng), capped)
        }
        _ => unreachable!("checked above"),
    };
    let edges = g
        .edges()
        .iter()
        .copied()
        .filter(|e| removed.binary_search(e).is_err())
        .chain(added.iter().copied());
    Ok(GraphAttack {
        graph: g.with_edges(edges)?,
        added,
        removed,
        capped,
    })
}
