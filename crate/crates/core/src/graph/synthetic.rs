use rand::seq::SliceRandom;
use rand::Rng as _;

use super::features::{init_node_features, FeaturePolicy};
use super::{Graph, GraphDataset};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

/// Synthetic TRIANGLES-style dataset: a graph of class `i` (labels `1..=n_classes`)
/// holds exactly `i` triangles.
///
/// Each graph is `i` disjoint 3-cliques plus padding nodes, every one of which
/// arrives with a single edge to an already placed node. A node with one edge
/// cannot close a triangle, so the count is exact by construction. Node totals
/// are uniform in `[3i, 3i + 10]` and node ids are shuffled.
pub fn generate_triangles_dataset(n_classes: usize, samples_per_class: usize, seed: u64) -> Result<GraphDataset> {
    if !(1..=10).contains(&n_classes) {
        return Err(Error::Contract(format!(
            "n_classes must be in 1..=10, got {n_classes}"
        )));
    }
    if samples_per_class == 0 {
        return Err(Error::Contract("samples_per_class must be at least 1".into()));
    }
    let mut rng = stream(seed, &[purpose::SYNTHETIC]);
    let mut graphs = Vec::with_capacity(n_classes * samples_per_class);
    for class in 1..=n_classes {
        for _ in 0..samples_per_class {
            let core = 3 * class;
            let n = rng.gen_range(core..=core + 10);
            let mut edges = Vec::with_capacity(3 * class + n - core);
            for t in 0..class {
                let (a, b, c) = (3 * t, 3 * t + 1, 3 * t + 2);
                edges.extend([(a, b), (b, c), (a, c)]);
            }
            for v in core..n {
                edges.push((rng.gen_range(0..v), v));
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let g = Graph::new(n, edges.into_iter().map(|(u, v)| (perm[u], perm[v])), 0)?;
            graphs.push((g, class as i64));
        }
    }
    let ds = GraphDataset::from_original_labels("TRIANGLES-synthetic", graphs);
    init_node_features(ds, FeaturePolicy::Auto)
}
