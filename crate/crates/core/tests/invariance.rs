mod support;

use protoglyph::autodiff::{Tape, Tensor};
use protoglyph::embedder::Pooling;
use protoglyph::graph::Graph;
use protoglyph::proto::{class_log_probs, class_probs};
use proptest::prelude::*;
use support::checks;

const POOLINGS: [Pooling; 3] = [Pooling::Mean, Pooling::Sum, Pooling::MeanVar];

#[test]
fn batched_embedding_matches_dense_reference() {
    for pooling in POOLINGS {
        for seed in 0..4 {
            let gap = checks::dense_oracle_gap(pooling, seed);
            assert!(gap <= 1e-10, "{pooling} seed {seed}: {gap:e}");
        }
    }
}

#[test]
fn node_relabelling_leaves_outputs_unchanged() {
    for pooling in POOLINGS {
        for seed in 0..4 {
            let gap = checks::permutation_gap(pooling, seed);
            assert!(gap <= 1e-10, "{pooling} seed {seed}: {gap:e}");
        }
    }
}

#[test]
fn common_shift_leaves_class_distribution_unchanged() {
    assert!(checks::translation_gap(1) <= 1e-10);
}

#[test]
fn scale_does_not_change_the_predicted_class() {
    assert_eq!(checks::alpha_argmax_violations(2), 0);
}

#[test]
fn graph_norm_on_one_node_returns_shift() {
    assert!(checks::graph_norm_single_node_gap(3) <= 1e-12);
}

#[test]
fn degenerate_mixup_gates_cost_nothing() {
    let (ones, twins) = checks::mixup_gate_losses(4);
    assert_eq!(ones, 0.0);
    assert_eq!(twins, 0.0);
}

#[test]
fn sampler_structure_over_many_episodes() {
    let audit = checks::sampler_audit(10_000, 5);
    assert!(audit.violations.is_empty(), "{:?}", &audit.violations[..audit.violations.len().min(5)]);
    assert!(audit.max_class_z < 4.5, "class frequency z = {}", audit.max_class_z);
}

#[test]
fn batching_does_not_mix_graphs() {
    let mut rng = protoglyph::rng::stream(9, &[1]);
    let cfg = checks::model(protoglyph::model::Variant::Pn, Pooling::MeanVar);
    let mut store = cfg.init_params(9).unwrap();
    checks::jitter(&mut store, &mut rng);
    let graphs: Vec<Graph> = (0..5).map(|_| checks::random_graph(&mut rng, 0)).collect();
    let refs: Vec<&Graph> = graphs.iter().collect();
    let together = checks::embed(&store, &cfg.embedder, &refs);
    for (g, row) in graphs.iter().zip(&together) {
        let alone = checks::embed(&store, &cfg.embedder, &[g]);
        for (a, b) in alone[0].iter().zip(row) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_probabilities_are_a_distribution(
        dist in prop::collection::vec(prop::collection::vec(0.0f64..1e4, 2..7), 1..6)
    ) {
        let width = dist[0].len();
        let rows: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().cycle().take(width).copied().collect()).collect();
        let mut t = Tape::new();
        let d = t.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let p = class_probs(&mut t, d).unwrap();
        let lp = class_log_probs(&mut t, d).unwrap();
        let (p, lp) = (t.value(p).clone(), t.value(lp).clone());
        for r in 0..rows.len() {
            let s: f64 = p.row_slice(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.row_slice(r).iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(lp.row_slice(r).iter().all(|v| v.is_finite() && *v <= 0.0));
        }
    }

    #[test]
    fn relabelled_graph_embeds_identically(seed in any::<u64>()) {
        let mut rng = protoglyph::rng::stream(seed, &[2]);
        let cfg = checks::model(protoglyph::model::Variant::Pn, Pooling::Mean);
        let store = cfg.init_params(seed).unwrap();
        let g = checks::random_graph(&mut rng, 0);
        let p = checks::shuffled(&g, &mut rng);
        let a = checks::embed(&store, &cfg.embedder, &[&g]);
        let b = checks::embed(&store, &cfg.embedder, &[&p]);
        for (x, y) in a[0].iter().zip(&b[0]) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}
