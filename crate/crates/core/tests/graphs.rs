use std::collections::BTreeSet;

use protoglyph::graph::{dataset_stats, generate_triangles_dataset, load_tu_dataset, write_tu_dataset, Graph};
use proptest::prelude::*;

/// Brute-force count over every node triple.
fn triangles_cubic(g: &Graph) -> usize {
    let n = g.node_count();
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in g.edges() {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    let mut count = 0;
    for a in 0..n {
        for b in a + 1..n {
            if !adj[a][b] {
                continue;
            }
            count += (b + 1..n).filter(|&c| adj[a][c] && adj[b][c]).count();
        }
    }
    count
}

/// Per-node (degree, sorted neighbour degrees), sorted; blind to node ids.
fn degree_profile(g: &Graph) -> Vec<(usize, Vec<usize>)> {
    let deg = g.degrees();
    let mut out: Vec<(usize, Vec<usize>)> = g
        .neighbors()
        .iter()
        .enumerate()
        .map(|(v, nb)| {
            let mut d: Vec<usize> = nb.iter().map(|&u| deg[u]).collect();
            d.sort_unstable();
            (deg[v], d)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_generated_graph_has_exactly_its_label_in_triangles() {
    let ds = generate_triangles_dataset(10, 25, 3).unwrap();
    assert_eq!(ds.len(), 250);
    for g in &ds.graphs {
        let label = ds.original_of(g.label);
        assert_eq!(triangles_cubic(g) as i64, label);
        let i = label as usize;
        assert!((3 * i..=3 * i + 10).contains(&g.node_count()));
    }
}

#[test]
fn single_class_one_triangle() {
    let ds = generate_triangles_dataset(1, 5, 0).unwrap();
    assert_eq!(ds.n_classes(), 1);
    for g in &ds.graphs {
        assert_eq!(triangles_cubic(g), 1);
        assert!((3..=13).contains(&g.node_count()));
    }
}

#[test]
fn class_three_hundred_samples() {
    let ds = generate_triangles_dataset(3, 100, 11).unwrap();
    let class3: Vec<&Graph> = ds.graphs.iter().filter(|g| ds.original_of(g.label) == 3).collect();
    assert_eq!(class3.len(), 100);
    assert!(class3.iter().all(|g| triangles_cubic(g) == 3));
}

#[test]
fn generator_is_deterministic_and_seed_sensitive() {
    let a = generate_triangles_dataset(5, 10, 42).unwrap();
    let b = generate_triangles_dataset(5, 10, 42).unwrap();
    let c = generate_triangles_dataset(5, 10, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);

    let dir = tempfile::tempdir().unwrap();
    write_tu_dataset(&a, &dir.path().join("x"), "T").unwrap();
    write_tu_dataset(&b, &dir.path().join("y"), "T").unwrap();
    for suffix in ["A", "graph_indicator", "graph_labels"] {
        let f = format!("T_{suffix}.txt");
        assert_eq!(
            std::fs::read(dir.path().join("x").join(&f)).unwrap(),
            std::fs::read(dir.path().join("y").join(&f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn tu_round_trip_preserves_structure() {
    let ds = generate_triangles_dataset(6, 8, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_tu_dataset(&ds, dir.path(), "TRI").unwrap();
    let back = load_tu_dataset(dir.path(), "TRI").unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.graphs.iter().zip(&back.graphs) {
        assert_eq!(ds.original_of(a.label), back.original_of(b.label));
        assert_eq!(a.node_count(), b.node_count());
        assert_eq!(a.edges(), b.edges());
        assert_eq!(degree_profile(a), degree_profile(b));
        assert_eq!(triangles_cubic(a), triangles_cubic(b));
    }
}

#[test]
fn stats_of_single_triangle() {
    let g = Graph::new(3, [(0, 1), (1, 2), (0, 2)], 0).unwrap();
    let ds = protoglyph::graph::GraphDataset::from_original_labels("one", vec![(g, 1)]);
    let s = dataset_stats(&ds).unwrap();
    assert_eq!((s.avg_nodes, s.avg_edges, s.n_samples, s.n_classes), (3.0, 3.0, 1, 1));
    assert_eq!(s.samples_per_class.into_iter().collect::<Vec<_>>(), vec![(1, 1)]);
}

#[test]
fn stats_of_generated_set() {
    let ds = generate_triangles_dataset(10, 7, 1).unwrap();
    let s = dataset_stats(&ds).unwrap();
    assert_eq!(s.n_samples, 70);
    assert_eq!(s.n_classes, 10);
    assert!(s.samples_per_class.values().all(|&n| n == 7));
    let labels: BTreeSet<i64> = s.samples_per_class.keys().copied().collect();
    assert_eq!(labels, (1..=10).collect());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_seed_gives_exact_triangle_counts(seed in any::<u64>(), k in 1usize..=10) {
        let ds = generate_triangles_dataset(k, 2, seed).unwrap();
        for g in &ds.graphs {
            prop_assert_eq!(triangles_cubic(g) as i64, ds.original_of(g.label));
        }
    }

    #[test]
    fn permutation_preserves_triangle_count(seed in any::<u64>(), rot in 0usize..40) {
        let ds = generate_triangles_dataset(4, 1, seed).unwrap();
        for g in &ds.graphs {
            let n = g.node_count();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let p = g.permuted(&perm).unwrap();
            prop_assert_eq!(triangles_cubic(&p), triangles_cubic(g));
            prop_assert_eq!(p.edge_count(), g.edge_count());
        }
    }
}
