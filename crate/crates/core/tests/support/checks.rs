//! Measurements shared by the invariance tests and the acceptance harness.

use std::collections::{BTreeMap, BTreeSet};

use protoglyph::autodiff::{ParameterStore, Tape, Tensor};
use protoglyph::embedder::{embed_graphs, graph_norm, EmbedderConfig, GraphBatch, Pooling};
use protoglyph::episodes::{make_class_split, sample_episode, EpisodeSpec, Phase, ValMode};
use protoglyph::graph::{generate_triangles_dataset, Graph};
use protoglyph::mixup::{mixup_loss, MixPair};
use protoglyph::model::{argmax, forward_graphs, ForwardOptions, ModelConfig, Variant};
use protoglyph::proto::{class_distribution, distance, Metric};
use protoglyph::rng::{stream, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const D_IN: usize = 3;

pub fn random_graph(rng: &mut Rng, label: usize) -> Graph {
    let n = rng.gen_range(1..=9);
    let m = rng.gen_range(0..=2 * n);
    let edges: Vec<(usize, usize)> = (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    let mut g = Graph::new(n, edges, label).unwrap();
    let feats = (0..n * D_IN).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.features = Tensor::from_vec(n, D_IN, feats).unwrap();
    g
}

pub fn shuffled(g: &Graph, rng: &mut Rng) -> Graph {
    let mut perm: Vec<usize> = (0..g.node_count()).collect();
    perm.shuffle(rng);
    g.permuted(&perm).unwrap()
}

pub fn model(variant: Variant, pooling: Pooling) -> ModelConfig {
    ModelConfig {
        d_in: D_IN,
        embedder: EmbedderConfig {
            n_layers: 2,
            hidden_dim: 5,
            mlp_layers: 2,
            dropout: 0.0,
            pooling,
        },
        variant,
        metric: Metric::SquaredL2,
        alpha_init: 1.3,
        gamma0_init: 0.5,
        beta0_init: 0.7,
    }
}

/// Perturbs every parameter so GraphNorm and ε leave their identity init.
pub fn jitter(store: &mut ParameterStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

pub fn embed(store: &ParameterStore, cfg: &EmbedderConfig, graphs: &[&Graph]) -> Vec<Vec<f64>> {
    let batch = GraphBatch::new(graphs).unwrap();
    let mut t = Tape::new();
    let e = embed_graphs(&mut t, store, cfg, &batch, None, None).unwrap();
    let v = t.value(e);
    (0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

type Mat = Vec<Vec<f64>>;

fn param(store: &ParameterStore, name: &str) -> Mat {
    let t = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn col_mean(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Dense-adjacency reference embedding of one graph.
pub fn dense_embed(store: &ParameterStore, cfg: &EmbedderConfig, g: &Graph) -> Vec<f64> {
    let n = g.node_count();
    let mut adj = vec![vec![0.0; n]; n];
    for &(u, v) in g.edges() {
        adj[u][v] = 1.0;
        adj[v][u] = 1.0;
    }
    let mut h: Mat = (0..n).map(|r| g.features.row_slice(r).to_vec()).collect();
    let mut outs: Vec<Mat> = Vec::new();
    for l in 0..cfg.n_layers {
        let p = format!("embedder.layer{l}");
        let eps = param(store, &format!("{p}.epsilon"))[0][0];
        let mut x: Mat = (0..n)
            .map(|v| {
                (0..h[0].len())
                    .map(|j| (1.0 + eps) * h[v][j] + (0..n).map(|u| adj[v][u] * h[u][j]).sum::<f64>())
                    .collect()
            })
            .collect();
        for i in 0..cfg.mlp_layers {
            if i > 0 {
                let a = &param(store, &format!("{p}.gn.{}.alpha", i - 1))[0];
                let gm = &param(store, &format!("{p}.gn.{}.gamma", i - 1))[0];
                let b = &param(store, &format!("{p}.gn.{}.beta", i - 1))[0];
                let mu = col_mean(&x);
                let c: Mat = x.iter().map(|r| r.iter().enumerate().map(|(j, v)| v - a[j] * mu[j]).collect()).collect();
                let var: Vec<f64> = (0..mu.len()).map(|j| c.iter().map(|r| r[j] * r[j]).sum::<f64>() / n as f64).collect();
                x = c
                    .iter()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .map(|(j, v)| (gm[j] * v / (var[j] + 1e-5).sqrt() + b[j]).max(0.0))
                            .collect()
                    })
                    .collect();
            }
            x = affine(&x, &param(store, &format!("{p}.mlp.{i}.w")), &param(store, &format!("{p}.mlp.{i}.b"))[0]);
        }
        h = x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        outs.push(h.clone());
    }
    let cat: Mat = (0..n).map(|v| outs.iter().flat_map(|o| o[v].clone()).collect()).collect();
    match cfg.pooling {
        Pooling::Mean => col_mean(&cat),
        Pooling::Sum => (0..cat[0].len()).map(|j| cat.iter().map(|r| r[j]).sum()).collect(),
        Pooling::MeanVar => {
            let z = affine(&cat, &param(store, "embedder.pool.halve.w"), &param(store, "embedder.pool.halve.b")[0]);
            let mu = col_mean(&z);
            let sd = (0..mu.len()).map(|j| {
                (z.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n as f64 + 1e-8).sqrt()
            });
            mu.iter().copied().chain(sd).collect()
        }
    }
}

/// Largest gap between batched embeddings and the dense reference.
pub fn dense_oracle_gap(pooling: Pooling, seed: u64) -> f64 {
    let mut rng = stream(seed, &[0xd0]);
    let cfg = model(Variant::Pn, pooling);
    let mut store = cfg.init_params(seed).unwrap();
    jitter(&mut store, &mut rng);
    let graphs: Vec<Graph> = (0..6).map(|_| random_graph(&mut rng, 0)).collect();
    let refs: Vec<&Graph> = graphs.iter().collect();
    let got = embed(&store, &cfg.embedder, &refs);
    let want: Vec<Vec<f64>> = graphs.iter().map(|g| dense_embed(&store, &cfg.embedder, g)).collect();
    max_gap(&got, &want)
}

/// Largest change in embeddings, and in the episode's class log-probs for a
/// conditioned model, when every graph's nodes are relabelled.
pub fn permutation_gap(pooling: Pooling, seed: u64) -> f64 {
    let mut rng = stream(seed, &[0xa1]);
    let cfg = model(Variant::PnTae, pooling);
    let mut store = cfg.init_params(seed).unwrap();
    jitter(&mut store, &mut rng);
    let graphs: Vec<Graph> = (0..8).map(|i| random_graph(&mut rng, i / 4)).collect();
    let perm: Vec<Graph> = graphs.iter().map(|g| shuffled(g, &mut rng)).collect();
    let a: Vec<&Graph> = graphs.iter().collect();
    let b: Vec<&Graph> = perm.iter().collect();
    let mut gap = max_gap(&embed(&store, &cfg.embedder, &a), &embed(&store, &cfg.embedder, &b));

    let logp = |gs: &[&Graph]| {
        let mut t = Tape::new();
        let out = forward_graphs(&mut t, &store, &cfg, &gs[..4], &gs[4..], &[0, 0, 1, 1], 2, 2, ForwardOptions::default())
            .unwrap();
        let v = t.value(out.log_probs);
        (0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect::<Vec<_>>()
    };
    let mixed: Vec<&Graph> = a[..2].iter().chain(&b[2..4]).chain(&a[4..6]).chain(&b[6..]).copied().collect();
    gap = gap.max(max_gap(&logp(&a), &logp(&b))).max(max_gap(&logp(&a), &logp(&mixed)));
    gap
}

/// Largest change in class probabilities when queries and prototypes are
/// shifted by one common vector.
pub fn translation_gap(seed: u64) -> f64 {
    let mut rng = stream(seed, &[0xb2]);
    let mut gap: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.gen_range(1..12);
        let n = rng.gen_range(2..8);
        let alpha = rng.gen_range(0.01..10.0);
        let vec = |rng: &mut Rng| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        let q = vec(&mut rng);
        let protos: Vec<Vec<f64>> = (0..n).map(|_| vec(&mut rng)).collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let add = |v: &[f64]| v.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<f64>>();
        let moved: Vec<Vec<f64>> = protos.iter().map(|p| add(p)).collect();
        for metric in [Metric::SquaredL2, Metric::L2] {
            let a = class_distribution(&q, &protos, alpha, metric);
            let b = class_distribution(&add(&q), &moved, alpha, metric);
            gap = gap.max(max_gap(&[a], &[b]));
        }
    }
    gap
}

/// Number of draws where the most probable class is not the nearest
/// prototype, or differs across positive scales.
pub fn alpha_argmax_violations(seed: u64) -> usize {
    let mut rng = stream(seed, &[0xc3]);
    let mut bad = 0;
    for _ in 0..500 {
        let d = rng.gen_range(1..8);
        let n = rng.gen_range(2..6);
        let vec = |rng: &mut Rng| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let q = vec(&mut rng);
        let protos: Vec<Vec<f64>> = (0..n).map(|_| vec(&mut rng)).collect();
        let nearest = protos
            .iter()
            .enumerate()
            .min_by(|a, b| distance(&q, a.1, Metric::SquaredL2).total_cmp(&distance(&q, b.1, Metric::SquaredL2)))
            .unwrap()
            .0;
        for alpha in [1e-3, 0.1, 1.0, 7.5, 90.0] {
            if argmax(&class_distribution(&q, &protos, alpha, Metric::SquaredL2)) != nearest {
                bad += 1;
            }
        }
    }
    bad
}

/// Output of GraphNorm (mean scale 1) on single-node graphs minus its shift.
pub fn graph_norm_single_node_gap(seed: u64) -> f64 {
    let mut rng = stream(seed, &[0xe4]);
    let mut gap: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.gen_range(1..6);
        let mut g = Graph::new(1, [], 0).unwrap();
        g.features = Tensor::from_vec(1, d, (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let batch = GraphBatch::new(&[&g]).unwrap();
        let beta: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let h = t.constant(batch.features.clone()).unwrap();
        let a = t.constant(Tensor::filled(1, d, 1.0)).unwrap();
        let gm = t.constant(Tensor::row((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())).unwrap();
        let b = t.constant(Tensor::row(beta.clone())).unwrap();
        let y = graph_norm(&mut t, h, &batch, a, gm, b).unwrap();
        gap = gap.max(max_gap(&[t.value(y).data().to_vec()], &[beta]));
    }
    gap
}

/// MixUp loss with an all-ones gate, and with two identical supports.
pub fn mixup_gate_losses(seed: u64) -> (f64, f64) {
    let mut rng = stream(seed, &[0xf5]);
    let (n, k, d) = (3, 2, 6);
    let rows: Vec<Vec<f64>> = (0..n * k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let protos: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..d).map(|j| (rows[c * k][j] + rows[c * k + 1][j]) / 2.0).collect())
        .collect();
    let loss = |rows: &[Vec<f64>], plan: &[MixPair]| {
        let mut t = Tape::new();
        let s = t.constant(Tensor::from_rows(rows).unwrap()).unwrap();
        let p = t.constant(Tensor::from_rows(&protos).unwrap()).unwrap();
        let a = t.constant(Tensor::scalar(2.0)).unwrap();
        let (l, _) = mixup_loss(&mut t, s, p, a, k, Metric::SquaredL2, plan, None).unwrap();
        t.value(l).item()
    };
    let random_mask = |rng: &mut Rng| (0..d).map(|_| rng.gen_bool(0.5)).collect::<Vec<bool>>();
    let ones: Vec<MixPair> = [(0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(c1, c2)| MixPair {
            class1: c1,
            shot1: 1,
            class2: c2,
            shot2: 0,
            mask: vec![true; d],
        })
        .collect();
    let mut twin = rows.clone();
    twin[2] = twin[1].clone();
    let same = vec![MixPair {
        class1: 0,
        shot1: 1,
        class2: 1,
        shot2: 0,
        mask: random_mask(&mut rng),
    }];
    (loss(&rows, &ones), loss(&twin, &same))
}

#[derive(Debug, Default)]
pub struct SamplerAudit {
    pub episodes: usize,
    pub violations: Vec<String>,
    /// Largest |z| of a class's selection count against N/C.
    pub max_class_z: f64,
}

/// Draws `n` 3-way 5-shot 15-query episodes from the base pool of a
/// synthetic set and checks their structure.
pub fn sampler_audit(n: usize, seed: u64) -> SamplerAudit {
    let ds = generate_triangles_dataset(10, 120, seed).unwrap();
    let spec = EpisodeSpec::new(3, 5, 15, seed).unwrap();
    let split = make_class_split(&ds, &[1, 2, 3, 4, 5, 6, 7], &[], &[8, 9, 10], ValMode::BaseSubsample20Pct, &spec)
        .unwrap();
    let pool = split.pool(Phase::Train);
    let mut audit = SamplerAudit {
        episodes: n,
        ..Default::default()
    };
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rng = stream(seed, &[0x5a]);
    for e in 0..n {
        let ep = sample_episode(pool, &spec, &mut rng).unwrap();
        let mut fail = |m: String| audit.violations.push(format!("episode {e}: {m}"));
        let classes: BTreeSet<usize> = ep.classes.iter().copied().collect();
        if classes.len() != 3 {
            fail(format!("{} distinct classes", classes.len()));
        }
        let sup = ep.support_indices();
        let qry = ep.query_indices();
        if sup.len() != 15 || qry.len() != 45 {
            fail(format!("{} supports, {} queries", sup.len(), qry.len()));
        }
        let all: BTreeSet<usize> = sup.iter().chain(&qry).copied().collect();
        if all.len() != sup.len() + qry.len() {
            fail("repeated sample".into());
        }
        for (local, &c) in ep.classes.iter().enumerate() {
            *counts.entry(c).or_default() += 1;
            if !pool.contains_key(&c) {
                fail(format!("class {c} outside the pool"));
                continue;
            }
            for &i in ep.supports[local].iter().chain(&ep.queries[local]) {
                if ds.graphs[i].label != c || !pool[&c].contains(&i) {
                    fail(format!("sample {i} does not belong to class {c}"));
                }
            }
        }
        let want: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 15)).collect();
        if ep.query_labels != want {
            fail("query labels are not class-major".into());
        }
    }
    let p = 3.0 / 7.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    audit.max_class_z = counts
        .values()
        .map(|&c| ((c as f64 - n as f64 * p) / sd).abs())
        .fold(0.0, f64::max);
    if counts.len() != 7 {
        audit.violations.push(format!("{} of 7 base classes drawn", counts.len()));
    }
    audit
}

#[derive(Debug, Clone, Copy)]
pub struct ChanceStats {
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub se_accuracy: f64,
    pub mean_nll: f64,
    pub se_nll: f64,
}

impl ChanceStats {
    pub fn accuracy_z(&self, n_way: usize) -> f64 {
        (self.mean_accuracy - 1.0 / n_way as f64) / self.se_accuracy
    }

    pub fn nll_z(&self, n_way: usize) -> f64 {
        (self.mean_nll - (n_way as f64).ln()) / self.se_nll
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Runs `params` on `n` 3-way 5-shot 15-query episodes whose graphs are
/// drawn fresh and i.i.d. for every episode, labels assigned by position,
/// so no class signal exists.
pub fn chance_level(params: &ParameterStore, cfg: &ModelConfig, n: usize, seed: u64) -> ChanceStats {
    let (n_way, k, q) = (3, 5, 15);
    let mut accs = Vec::with_capacity(n);
    let mut nlls = Vec::with_capacity(n);
    for e in 0..n as u64 {
        let key = protoglyph::rng::derive_key(seed, &[0xca, e]);
        let ds = generate_triangles_dataset(10, 6, key).unwrap();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream(key, &[1]));
        let block = |c: usize| &order[c * (k + q)..(c + 1) * (k + q)];
        let supports: Vec<&Graph> = (0..n_way).flat_map(|c| block(c)[..k].iter().map(|&i| &ds.graphs[i])).collect();
        let queries: Vec<&Graph> = (0..n_way).flat_map(|c| block(c)[k..].iter().map(|&i| &ds.graphs[i])).collect();
        let labels: Vec<usize> = (0..n_way).flat_map(|c| std::iter::repeat_n(c, q)).collect();
        let mut t = Tape::new();
        let out = forward_graphs(&mut t, params, cfg, &supports, &queries, &labels, n_way, k, ForwardOptions::default())
            .unwrap();
        accs.push(protoglyph::model::accuracy(t.value(out.log_probs), &labels));
        nlls.push(t.value(out.nll).item());
    }
    let (mean_accuracy, se_accuracy) = mean_se(&accs);
    let (mean_nll, se_nll) = mean_se(&nlls);
    ChanceStats {
        episodes: n,
        mean_accuracy,
        se_accuracy,
        mean_nll,
        se_nll,
    }
}

/// Losses of PN and of PN+TAE+MU with neutral conditioning gains and no
/// MixUp weight, on `n` train episodes in train mode. Returns the number
/// of episodes whose losses differ in any bit, and the largest gap.
pub fn variant_collapse(n: usize, dropout: f64, seed: u64) -> (usize, f64) {
    use protoglyph::episodes::episode_at;
    use protoglyph::trainer::total_loss;

    let over = [
        "model.gamma0_init=0".to_string(),
        "model.beta0_init=0".into(),
        "train.lambda_mixup=0".into(),
        format!("embedder.dropout={dropout}"),
        format!("seed={seed}"),
        "dataset.synthetic.samples_per_class=100".into(),
    ];
    let cfg = protoglyph::config::RunConfig::load(&super::defaults_dir().join("synthetic-triangles.json"), &over).unwrap();
    let ds = cfg.load_dataset().unwrap();
    let (split, _) = cfg.split(&ds).unwrap();
    let mut tc = cfg.train_config().unwrap();
    let mut run = |variant: Variant| {
        tc.variant = variant;
        let m = tc.model_config(ds.d_in);
        let params = m.init_params(seed).unwrap();
        (0..n as u64)
            .map(|i| {
                let ep = episode_at(&split, Phase::Train, &tc.spec, 0, i).unwrap();
                let opts = ForwardOptions {
                    train: true,
                    key: protoglyph::rng::derive_key(seed, &[0xc0, i]),
                    ..Default::default()
                };
                let mut t = Tape::new();
                let (loss, _) = total_loss(&mut t, &params, &tc, &m, &ds, &ep, opts).unwrap();
                t.value(loss).item()
            })
            .collect::<Vec<f64>>()
    };
    let pn = run(Variant::Pn);
    let full = run(Variant::PnTaeMu);
    let mismatches = pn.iter().zip(&full).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    let gap = pn.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (mismatches, gap)
}

/// Ratio of the ci95 half-widths of `4n` and `n` resampled accuracies.
pub fn ci_quadrupling_ratio(base: &[f64], n: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x71]);
    let mut draw = |m: usize| (0..m).map(|_| base[rng.gen_range(0..base.len())]).collect::<Vec<f64>>();
    let small = protoglyph::eval::confidence_interval(&draw(n)).unwrap().2;
    let large = protoglyph::eval::confidence_interval(&draw(4 * n)).unwrap().2;
    large / small
}
