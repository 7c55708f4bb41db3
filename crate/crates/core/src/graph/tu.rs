//! TU benchmark multi-file text format.
//!
//! ```text
//! <name>_A.txt                 "i, j" per line, 1-indexed global node ids
//! <name>_graph_indicator.txt   graph id (1-indexed) of node i on line i
//! <name>_graph_labels.txt      label of graph j on line j
//! <name>_node_labels.txt       optional, integer label of node i on line i
//! <name>_node_attributes.txt   optional, comma-separated reals per node
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::features::{init_node_features, FeaturePolicy};
use super::{Graph, GraphDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn file(root: &Path, name: &str, suffix: &str) -> PathBuf {
    root.join(format!("{name}_{suffix}.txt"))
}

fn read_required(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    if path.is_file() {
        fs::read_to_string(path).map(Some).map_err(|e| Error::io(path, e))
    } else {
        Ok(None)
    }
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_int(path: &Path, line: usize, s: &str) -> Result<i64> {
    s.trim().parse().map_err(|_| Error::Format {
        file: path.to_path_buf(),
        line,
        msg: format!("expected an integer, found `{s}`"),
    })
}

/// Loads `<root>/<name>_*.txt` and initializes features with the default policy.
pub fn load_tu_dataset(root: &Path, name: &str) -> Result<GraphDataset> {
    let a_path = file(root, name, "A");
    let ind_path = file(root, name, "graph_indicator");
    let lab_path = file(root, name, "graph_labels");
    let edges_txt = read_required(&a_path)?;
    let ind_txt = read_required(&ind_path)?;
    let lab_txt = read_required(&lab_path)?;

    let mut graph_labels = Vec::new();
    for (ln, l) in lines(&lab_txt) {
        graph_labels.push(parse_int(&lab_path, ln, l)?);
    }
    let n_graphs = graph_labels.len();

    // node (0-based global) -> (graph, local index)
    let mut node_graph = Vec::new();
    let mut sizes = vec![0usize; n_graphs];
    for (ln, l) in lines(&ind_txt) {
        let gid = parse_int(&ind_path, ln, l)?;
        if gid < 1 || gid as usize > n_graphs {
            return Err(Error::Format {
                file: ind_path.clone(),
                line: ln,
                msg: format!("node refers to graph {gid} but only {n_graphs} graph labels exist"),
            });
        }
        let g = gid as usize - 1;
        node_graph.push((g, sizes[g]));
        sizes[g] += 1;
    }
    let n_nodes = node_graph.len();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_graphs];
    for (ln, l) in lines(&edges_txt) {
        let mut parts = l.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format {
                file: a_path.clone(),
                line: ln,
                msg: format!("expected `i, j`, found `{l}`"),
            });
        };
        let (a, b) = (parse_int(&a_path, ln, a)?, parse_int(&a_path, ln, b)?);
        for v in [a, b] {
            if v < 1 || v as usize > n_nodes {
                return Err(Error::Format {
                    file: a_path.clone(),
                    line: ln,
                    msg: format!("node {v} not listed in the graph indicator ({n_nodes} nodes)"),
                });
            }
        }
        let (ga, la) = node_graph[a as usize - 1];
        let (gb, lb) = node_graph[b as usize - 1];
        if ga != gb {
            return Err(Error::Format {
                file: a_path.clone(),
                line: ln,
                msg: format!("edge joins graphs {} and {}", ga + 1, gb + 1),
            });
        }
        edges[ga].push((la, lb));
    }

    let nl_path = file(root, name, "node_labels");
    let node_labels = match read_optional(&nl_path)? {
        Some(txt) => {
            let mut v = Vec::with_capacity(n_nodes);
            for (ln, l) in lines(&txt) {
                // some releases carry several comma-separated label columns; the first is used
                let first = l.split(',').next().unwrap_or(l);
                v.push(parse_int(&nl_path, ln, first)?);
            }
            if v.len() != n_nodes {
                return Err(Error::Format {
                    file: nl_path,
                    line: v.len(),
                    msg: format!("{} node labels for {n_nodes} nodes", v.len()),
                });
            }
            Some(v)
        }
        None => None,
    };

    let at_path = file(root, name, "node_attributes");
    let node_attrs = match read_optional(&at_path)? {
        Some(txt) => {
            let mut rows = Vec::with_capacity(n_nodes);
            for (ln, l) in lines(&txt) {
                let row = l
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| Error::Format {
                            file: at_path.clone(),
                            line: ln,
                            msg: format!("expected a real, found `{s}`"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
            if rows.len() != n_nodes {
                return Err(Error::Format {
                    file: at_path,
                    line: rows.len(),
                    msg: format!("{} attribute rows for {n_nodes} nodes", rows.len()),
                });
            }
            Some(rows)
        }
        None => None,
    };

    let mut per_graph_labels: Vec<Vec<i64>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut per_graph_attrs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_graphs];
    for (node, &(g, _)) in node_graph.iter().enumerate() {
        if let Some(nl) = &node_labels {
            per_graph_labels[g].push(nl[node]);
        }
        if let Some(at) = &node_attrs {
            per_graph_attrs[g].push(at[node].clone());
        }
    }

    let mut graphs = Vec::with_capacity(n_graphs);
    for (g, label) in graph_labels.into_iter().enumerate() {
        let mut graph = Graph::new(sizes[g], edges[g].iter().copied(), 0)?;
        if node_labels.is_some() {
            graph.node_labels = Some(std::mem::take(&mut per_graph_labels[g]));
        }
        if let Some(attrs) = node_attrs.as_ref() {
            let rows = std::mem::take(&mut per_graph_attrs[g]);
            let width = attrs.first().map_or(0, Vec::len);
            graph.node_attributes = Some(if rows.is_empty() {
                Tensor::zeros(0, width)
            } else {
                Tensor::from_rows(&rows).map_err(|_| Error::Format {
                    file: at_path.clone(),
                    line: 0,
                    msg: format!("ragged attribute rows in graph {}", g + 1),
                })?
            });
        }
        graphs.push((graph, label));
    }
    let ds = GraphDataset::from_original_labels(name, graphs);
    init_node_features(ds, FeaturePolicy::Auto)
}

/// Writes `dataset` in TU format under `root` with original graph labels.
/// Every undirected edge is emitted in both directions.
pub fn write_tu_dataset(dataset: &GraphDataset, root: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut labels = String::new();
    let mut node_labels = String::new();
    let mut attrs = String::new();
    let with_nl = dataset.has_node_labels();
    let with_at = dataset.has_node_attributes();
    let mut offset = 0usize;
    for (gi, g) in dataset.graphs.iter().enumerate() {
        for v in 0..g.node_count() {
            let _ = writeln!(ind, "{}", gi + 1);
            if with_nl {
                let _ = writeln!(node_labels, "{}", g.node_labels.as_ref().unwrap()[v]);
            }
            if with_at {
                let row = g.node_attributes.as_ref().unwrap().row_slice(v);
                let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(attrs, "{}", cells.join(", "));
            }
        }
        for (u, v) in g.directed_edges() {
            let _ = writeln!(a, "{}, {}", offset + u + 1, offset + v + 1);
        }
        let _ = writeln!(labels, "{}", dataset.original_of(g.label));
        offset += g.node_count();
    }
    let write = |suffix: &str, body: &str| -> Result<()> {
        let p = file(root, name, suffix);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write("A", &a)?;
    write("graph_indicator", &ind)?;
    write("graph_labels", &labels)?;
    if with_nl {
        write("node_labels", &node_labels)?;
    }
    if with_at {
        write("node_attributes", &attrs)?;
    }
    Ok(())
}
