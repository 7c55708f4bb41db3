//! Graphs, datasets, and dataset ingestion.

mod features;
mod synthetic;
mod tu;

use std::collections::BTreeMap;

use serde::Serialize;

pub use features::{init_node_features, FeaturePolicy, DEFAULT_MAX_DEGREE};
pub use synthetic::generate_triangles_dataset;
pub use tu::{load_tu_dataset, write_tu_dataset};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// An undirected graph with a dense node-feature matrix and a class label.
///
/// Edges are stored once each as `(u, v)` with `u < v`; self-loops are
/// dropped since the GIN update already carries the node's own term.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    pub features: Tensor,
    /// Contiguous class id within the owning dataset.
    pub label: usize,
    pub node_labels: Option<Vec<i64>>,
    pub node_attributes: Option<Tensor>,
}

impl Graph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>, label: usize) -> Result<Self> {
        let mut norm = Vec::new();
        for (a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(Error::Contract(format!(
                    "edge ({a}, {b}) out of range for {node_count} nodes"
                )));
            }
            if a != b {
                norm.push((a.min(b), a.max(b)));
            }
        }
        norm.sort_unstable();
        norm.dedup();
        Ok(Graph {
            node_count,
            edges: norm,
            features: Tensor::zeros(node_count, 0),
            label,
            node_labels: None,
            node_attributes: None,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Undirected edges, each once.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    /// Both directions of every edge as `(src, dst)`.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)])
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.node_count];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for (u, v) in self.directed_edges() {
            adj[u].push(v);
        }
        adj
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.node_count {
            return Err(Error::Contract("permutation length mismatch".into()));
        }
        let mut g = Graph::new(
            self.node_count,
            self.edges.iter().map(|&(u, v)| (perm[u], perm[v])),
            self.label,
        )?;
        let mut feats = Tensor::zeros(self.node_count, self.d_in());
        for (old, &new) in perm.iter().enumerate() {
            feats.row_slice_mut(new).copy_from_slice(self.features.row_slice(old));
        }
        g.features = feats;
        if let Some(nl) = &self.node_labels {
            let mut out = vec![0; nl.len()];
            for (old, &new) in perm.iter().enumerate() {
                out[new] = nl[old];
            }
            g.node_labels = Some(out);
        }
        if let Some(at) = &self.node_attributes {
            let mut out = Tensor::zeros(at.rows(), at.cols());
            for (old, &new) in perm.iter().enumerate() {
                out.row_slice_mut(new).copy_from_slice(at.row_slice(old));
            }
            g.node_attributes = Some(out);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    /// Sorted contiguous class ids `0..C`.
    pub class_ids: Vec<usize>,
    /// Original label for each contiguous class id.
    pub original_labels: Vec<i64>,
    pub d_in: usize,
}

impl GraphDataset {
    /// Builds a dataset from graphs whose `label` fields hold *original*
    /// labels; these are remapped to contiguous ids in sorted order.
    pub fn from_original_labels(name: impl Into<String>, graphs: Vec<(Graph, i64)>) -> Self {
        let mut originals: Vec<i64> = graphs.iter().map(|(_, l)| *l).collect();
        originals.sort_unstable();
        originals.dedup();
        let graphs = graphs
            .into_iter()
            .map(|(mut g, l)| {
                g.label = originals.binary_search(&l).expect("label present");
                g
            })
            .collect::<Vec<_>>();
        let d_in = graphs.first().map_or(0, Graph::d_in);
        GraphDataset {
            name: name.into(),
            graphs,
            class_ids: (0..originals.len()).collect(),
            original_labels: originals,
            d_in,
        }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_of_original(&self, original: i64) -> Option<usize> {
        self.original_labels.binary_search(&original).ok()
    }

    pub fn original_of(&self, class: usize) -> i64 {
        self.original_labels[class]
    }

    /// Sample indices grouped by contiguous class id, in dataset order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, g) in self.graphs.iter().enumerate() {
            m.entry(g.label).or_default().push(i);
        }
        m
    }

    pub fn has_node_labels(&self) -> bool {
        !self.graphs.is_empty() && self.graphs.iter().all(|g| g.node_labels.is_some())
    }

    pub fn has_node_attributes(&self) -> bool {
        !self.graphs.is_empty() && self.graphs.iter().all(|g| g.node_attributes.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.graphs.iter().enumerate() {
            if g.features.rows() != g.node_count || g.d_in() != self.d_in {
                return Err(Error::Contract(format!(
                    "graph {i}: feature matrix {:?} inconsistent with {} nodes × d_in {}",
                    g.features.shape(),
                    g.node_count,
                    self.d_in
                )));
            }
            if g.label >= self.class_ids.len() {
                return Err(Error::Contract(format!("graph {i}: label out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub avg_nodes: f64,
    pub avg_edges: f64,
    pub n_samples: usize,
    pub n_classes: usize,
    /// Keyed by original label.
    pub samples_per_class: BTreeMap<i64, usize>,
}

pub fn dataset_stats(dataset: &GraphDataset) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::Contract("statistics of an empty dataset".into()));
    }
    let n = dataset.len() as f64;
    let nodes: usize = dataset.graphs.iter().map(Graph::node_count).sum();
    let edges: usize = dataset.graphs.iter().map(Graph::edge_count).sum();
    let mut per_class = BTreeMap::new();
    for g in &dataset.graphs {
        *per_class.entry(dataset.original_of(g.label)).or_insert(0) += 1;
    }
    Ok(DatasetStats {
        avg_nodes: nodes as f64 / n,
        avg_edges: edges as f64 / n,
        n_samples: dataset.len(),
        n_classes: per_class.len(),
        samples_per_class: per_class,
    })
}
