use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::GraphDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_DEGREE: usize = 16;

/// How node features are built from a graph's raw annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeaturePolicy {
    /// One-hot node label when present, else degree one-hot with
    /// [`DEFAULT_MAX_DEGREE`], else constant one.
    #[default]
    Auto,
    OneHotNodeLabel,
    ContinuousAttributes,
    /// One-hot of `min(degree, max_degree)`; width `max_degree + 1`.
    DegreeOneHot { max_degree: usize },
    ConstantOne,
}

impl fmt::Display for FeaturePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeaturePolicy::Auto => f.write_str("auto"),
            FeaturePolicy::OneHotNodeLabel => f.write_str("one-hot-node-label"),
            FeaturePolicy::ContinuousAttributes => f.write_str("continuous-attributes"),
            FeaturePolicy::DegreeOneHot { max_degree } => write!(f, "degree-one-hot({max_degree})"),
            FeaturePolicy::ConstantOne => f.write_str("constant-one"),
        }
    }
}

impl FromStr for FeaturePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "auto" => FeaturePolicy::Auto,
            "one-hot-node-label" => FeaturePolicy::OneHotNodeLabel,
            "continuous-attributes" => FeaturePolicy::ContinuousAttributes,
            "constant-one" => FeaturePolicy::ConstantOne,
            "degree-one-hot" => FeaturePolicy::DegreeOneHot {
                max_degree: DEFAULT_MAX_DEGREE,
            },
            _ => {
                let inner = s
                    .strip_prefix("degree-one-hot(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("unknown feature policy `{s}`")))?;
                let max_degree = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad maximum degree in `{s}`")))?;
                FeaturePolicy::DegreeOneHot { max_degree }
            }
        })
    }
}

impl Serialize for FeaturePolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeaturePolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FeaturePolicy {
    pub fn resolve(self, dataset: &GraphDataset) -> FeaturePolicy {
        match self {
            FeaturePolicy::Auto if dataset.has_node_labels() => FeaturePolicy::OneHotNodeLabel,
            FeaturePolicy::Auto => FeaturePolicy::DegreeOneHot {
                max_degree: DEFAULT_MAX_DEGREE,
            },
            p => p,
        }
    }
}

/// Populates every graph's feature matrix per `policy`. Structure is untouched.
pub fn init_node_features(mut dataset: GraphDataset, policy: FeaturePolicy) -> Result<GraphDataset> {
    let policy = policy.resolve(&dataset);
    let d_in = match policy {
        FeaturePolicy::OneHotNodeLabel => {
            if !dataset.has_node_labels() {
                return Err(Error::Config(format!(
                    "feature policy {policy} requested but dataset `{}` has no node labels",
                    dataset.name
                )));
            }
            let mut vocab: Vec<i64> = dataset
                .graphs
                .iter()
                .flat_map(|g| g.node_labels.as_ref().unwrap().iter().copied())
                .collect();
            vocab.sort_unstable();
            vocab.dedup();
            let d = vocab.len().max(1);
            for g in &mut dataset.graphs {
                let labels = g.node_labels.as_ref().unwrap();
                let mut f = Tensor::zeros(g.node_count(), d);
                for (v, l) in labels.iter().enumerate() {
                    let k = vocab.binary_search(l).unwrap();
                    f.set(v, k, 1.0);
                }
                g.features = f;
            }
            d
        }
        FeaturePolicy::ContinuousAttributes => {
            if !dataset.has_node_attributes() {
                return Err(Error::Config(format!(
                    "feature policy {policy} requested but dataset `{}` has no node attributes",
                    dataset.name
                )));
            }
            let d = dataset.graphs[0].node_attributes.as_ref().unwrap().cols();
            for g in &mut dataset.graphs {
                let at = g.node_attributes.as_ref().unwrap();
                if at.cols() != d {
                    return Err(Error::Config("node attribute widths differ between graphs".into()));
                }
                g.features = at.clone();
            }
            d
        }
        FeaturePolicy::DegreeOneHot { max_degree } => {
            let d = max_degree + 1;
            for g in &mut dataset.graphs {
                let mut f = Tensor::zeros(g.node_count(), d);
                for (v, deg) in g.degrees().into_iter().enumerate() {
                    f.set(v, deg.min(max_degree), 1.0);
                }
                g.features = f;
            }
            d
        }
        FeaturePolicy::ConstantOne => {
            for g in &mut dataset.graphs {
                g.features = Tensor::filled(g.node_count(), 1, 1.0);
            }
            1
        }
        FeaturePolicy::Auto => unreachable!("resolved above"),
    };
    dataset.d_in = d_in;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn path_dataset() -> GraphDataset {
        // 0-1-2 path plus isolated node 3; node 1 has degree 2
        let g = Graph::new(4, [(0, 1), (1, 2)], 0).unwrap();
        GraphDataset::from_original_labels("p", vec![(g, 0)])
    }

    #[test]
    fn degree_one_hot_row_for_degree_two() {
        let ds = init_node_features(path_dataset(), FeaturePolicy::DegreeOneHot { max_degree: 4 }).unwrap();
        assert_eq!(ds.d_in, 5);
        assert_eq!(ds.graphs[0].features.row_slice(1), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        // isolated node lands on index 0
        assert_eq!(ds.graphs[0].features.row_slice(3), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn degree_is_clamped_at_the_maximum() {
        let star = Graph::new(5, [(0, 1), (0, 2), (0, 3), (0, 4)], 0).unwrap();
        let ds = GraphDataset::from_original_labels("s", vec![(star, 0)]);
        let ds = init_node_features(ds, FeaturePolicy::DegreeOneHot { max_degree: 2 }).unwrap();
        assert_eq!(ds.graphs[0].features.row_slice(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_one_policy() {
        let ds = init_node_features(path_dataset(), FeaturePolicy::ConstantOne).unwrap();
        assert_eq!(ds.d_in, 1);
        assert!(ds.graphs[0].features.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_hot_node_labels() {
        let mut ds = path_dataset();
        ds.graphs[0].node_labels = Some(vec![0, 1, 2, 1]);
        let ds = init_node_features(ds, FeaturePolicy::OneHotNodeLabel).unwrap();
        assert_eq!(ds.d_in, 3);
        assert_eq!(ds.graphs[0].features.row_slice(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn node_label_policy_without_labels_is_a_config_error() {
        let err = init_node_features(path_dataset(), FeaturePolicy::OneHotNodeLabel).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn auto_prefers_node_labels_then_degree() {
        let ds = init_node_features(path_dataset(), FeaturePolicy::Auto).unwrap();
        assert_eq!(ds.d_in, DEFAULT_MAX_DEGREE + 1);
        let mut labelled = path_dataset();
        labelled.graphs[0].node_labels = Some(vec![3, 3, 9, 3]);
        assert_eq!(init_node_features(labelled, FeaturePolicy::Auto).unwrap().d_in, 2);
    }

    #[test]
    fn policy_strings_round_trip() {
        for p in [
            FeaturePolicy::Auto,
            FeaturePolicy::OneHotNodeLabel,
            FeaturePolicy::ContinuousAttributes,
            FeaturePolicy::DegreeOneHot { max_degree: 7 },
            FeaturePolicy::ConstantOne,
        ] {
            assert_eq!(p.to_string().parse::<FeaturePolicy>().unwrap(), p);
        }
        assert!("degree-one-hot(x)".parse::<FeaturePolicy>().is_err());
    }
}
