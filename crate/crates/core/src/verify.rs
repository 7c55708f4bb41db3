//! Gradient check of the full model on a small frozen episode.

use rand::Rng as _;

use crate::autodiff::{finite_diff_check, GradCheckReport, ParameterStore, Tape, Tensor};
use crate::embedder::{EmbedderConfig, Pooling};
use crate::error::Result;
use crate::graph::Graph;
use crate::mixup::{plan_mixup, MixPair};
use crate::model::{forward_graphs, ForwardOptions, ModelConfig, Variant};
use crate::proto::Metric;
use crate::rng::{purpose, stream};
use crate::trainer::combine_loss;

pub const MICRO_D_IN: usize = 4;
pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// 2-way 2-shot 2-query episode over random graphs of 4 to 8 nodes with
/// continuous features.
#[derive(Debug, Clone)]
pub struct MicroEpisode {
    pub supports: Vec<Graph>,
    pub queries: Vec<Graph>,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
}

fn random_graph(rng: &mut crate::rng::Rng, label: usize) -> Result<Graph> {
    let n = rng.gen_range(4..=8);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
    for _ in 0..n / 2 {
        let (u, v) = (rng.gen_range(0..n), rng.gen_range(0..n));
        edges.push((u, v));
    }
    let mut g = Graph::new(n, edges, label)?;
    let feats = (0..n * MICRO_D_IN).map(|_| rng.gen_range(-1.0..1.0) + label as f64 * 0.5).collect();
    g.features = Tensor::from_vec(n, MICRO_D_IN, feats)?;
    Ok(g)
}

pub fn micro_episode(seed: u64) -> Result<MicroEpisode> {
    let mut rng = stream(seed, &[purpose::SYNTHETIC, 0x6d_6963_726f]);
    let (n_way, k_shot, n_query) = (2, 2, 2);
    let mut supports = Vec::new();
    let mut queries = Vec::new();
    let mut query_labels = Vec::new();
    for c in 0..n_way {
        for _ in 0..k_shot {
            supports.push(random_graph(&mut rng, c)?);
        }
    }
    for c in 0..n_way {
        for _ in 0..n_query {
            queries.push(random_graph(&mut rng, c)?);
            query_labels.push(c);
        }
    }
    Ok(MicroEpisode {
        supports,
        queries,
        query_labels,
        n_way,
        k_shot,
    })
}

/// Small model (hidden 4, two layers, embedding width 8) with non-zero
/// conditioning gains so every TAE parameter receives gradient.
pub fn micro_model(variant: Variant, pooling: Pooling) -> ModelConfig {
    ModelConfig {
        d_in: MICRO_D_IN,
        embedder: EmbedderConfig {
            n_layers: 2,
            hidden_dim: 4,
            mlp_layers: 2,
            dropout: 0.0,
            pooling,
        },
        variant,
        metric: Metric::SquaredL2,
        alpha_init: 0.5,
        gamma0_init: 0.4,
        beta0_init: 0.3,
    }
}

/// Compares autodiff and central-difference gradients of the training loss
/// (`λ_mixup = 0.5`, `λ_reg = 0.1`) for every parameter of `variant`.
pub fn gradcheck_variant(variant: Variant, pooling: Pooling, seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let model = micro_model(variant, pooling);
    let ep = micro_episode(seed)?;
    let store = model.init_params(seed)?;
    let plan: Vec<MixPair> = plan_mixup(
        ep.n_way,
        ep.k_shot,
        model.embedder.output_dim(),
        &mut stream(seed, &[purpose::MIXUP]),
    );
    let supports: Vec<&Graph> = ep.supports.iter().collect();
    let queries: Vec<&Graph> = ep.queries.iter().collect();
    let run = |s: &ParameterStore, tape: &mut Tape, targets: Option<&[f64]>| {
        let opts = ForwardOptions {
            train: true,
            key: seed,
            mixup_plan: Some(&plan),
            mixup_targets: targets,
        };
        forward_graphs(
            tape,
            s,
            &model,
            &supports,
            &queries,
            &ep.query_labels,
            ep.n_way,
            ep.k_shot,
            opts,
        )
    };
    // MixUp targets are constants of the loss, so probes reuse the base ones.
    let targets = run(&store, &mut Tape::new(), None)?.mixup_targets;
    finite_diff_check(
        |s, tape| {
            let out = run(s, tape, Some(&targets))?;
            combine_loss(tape, &out, 0.5, 0.1)
        },
        &store,
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_episode_respects_bounds() {
        let ep = micro_episode(3).unwrap();
        assert_eq!(ep.supports.len(), 4);
        assert_eq!(ep.queries.len(), 4);
        assert!(ep.supports.iter().chain(&ep.queries).all(|g| (4..=8).contains(&g.node_count())));
        assert!(micro_model(Variant::Pn, Pooling::Mean).embedder.output_dim() <= 8);
    }

    #[test]
    fn mean_var_and_sum_pooling_gradients() {
        for pooling in [Pooling::Sum, Pooling::MeanVar] {
            let r = gradcheck_variant(Variant::PnTaeMu, pooling, 5, GRADCHECK_STEP, GRADCHECK_TOL).unwrap();
            assert!(r.passed, "{pooling}: {r}");
        }
    }
}
