//! Full few-shot model: embedder, optional task conditioning, prototype head
//! and the MixUp regularizer, wired per episode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::embedder::{embed_graphs, register_embedder_params, EmbedderConfig, GraphBatch};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset};
use crate::mixup::{mixup_loss, plan_mixup, MixPair};
use crate::proto::{self, Metric};
use crate::rng::{purpose, stream};
use crate::tae::{self, TaeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub enum Variant {
    #[default]
    Pn,
    PnMu,
    PnTae,
    PnTaeMu,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Pn, Variant::PnMu, Variant::PnTae, Variant::PnTaeMu];

    pub fn has_tae(self) -> bool {
        matches!(self, Variant::PnTae | Variant::PnTaeMu)
    }

    pub fn has_mixup(self) -> bool {
        matches!(self, Variant::PnMu | Variant::PnTaeMu)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Pn => "PN",
            Variant::PnMu => "PN+MU",
            Variant::PnTae => "PN+TAE",
            Variant::PnTaeMu => "PN+TAE+MU",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected PN, PN+MU, PN+TAE or PN+TAE+MU)")))
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub embedder: EmbedderConfig,
    pub variant: Variant,
    pub metric: Metric,
    pub alpha_init: f64,
    pub gamma0_init: f64,
    pub beta0_init: f64,
}

impl ModelConfig {
    pub fn tae_config(&self) -> TaeConfig {
        TaeConfig {
            d: self.embedder.output_dim(),
            hidden_dim: self.embedder.hidden_dim,
            n_layers: self.embedder.n_layers,
            gamma0_init: self.gamma0_init,
            beta0_init: self.beta0_init,
        }
    }

    /// Fresh parameters. Initial values are keyed by parameter name, so
    /// shared parameters start identical across variants for one seed.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        if self.d_in == 0 {
            return Err(Error::Config("input feature width must be positive".into()));
        }
        let mut store = ParameterStore::new();
        register_embedder_params(&mut store, &self.embedder, self.d_in, seed)?;
        proto::register_head_params(&mut store, self.alpha_init)?;
        if self.variant.has_tae() {
            tae::register_tae_params(&mut store, &self.tae_config(), seed)?;
        }
        Ok(store)
    }
}

/// How an episode is run.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Enables dropout and the MixUp term.
    pub train: bool,
    /// Root key for the episode's dropout and MixUp streams.
    pub key: u64,
    /// Replaces the sampled MixUp pairs and masks.
    pub mixup_plan: Option<&'a [MixPair]>,
    /// Replaces the MixUp targets computed from the current parameters.
    pub mixup_targets: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    /// `N·Q × N` row-wise log class probabilities.
    pub log_probs: Var,
    pub nll: Var,
    pub mixup: Option<Var>,
    /// Row-major `pairs × N` targets behind `mixup`.
    pub mixup_targets: Vec<f64>,
    pub penalty: Option<Var>,
    pub support_emb: Var,
    pub query_emb: Var,
    pub prototypes: Var,
}

/// Runs one episode over explicit graphs. Supports are class-major,
/// `n_way · k_shot` of them.
#[allow(clippy::too_many_arguments)]
pub fn forward_graphs(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    supports: &[&Graph],
    queries: &[&Graph],
    query_labels: &[usize],
    n_way: usize,
    k_shot: usize,
    opts: ForwardOptions<'_>,
) -> Result<EpisodeOutput> {
    if supports.len() != n_way * k_shot {
        return Err(Error::Contract(format!(
            "{} supports for a {n_way}-way {k_shot}-shot episode",
            supports.len()
        )));
    }
    let ecfg = &cfg.embedder;
    let mut drop1 = opts.train.then(|| stream(opts.key, &[purpose::DROPOUT, 1]));
    let mut drop2 = opts.train.then(|| stream(opts.key, &[purpose::DROPOUT, 2]));

    let conditioning = if cfg.variant.has_tae() {
        let batch = GraphBatch::new(supports)?;
        let emb = embed_graphs(tape, store, ecfg, &batch, None, drop1.as_mut())?;
        let protos = proto::compute_prototypes(tape, emb, n_way, k_shot)?;
        Some(tae::conditioning(tape, store, protos.episode_rep, ecfg.n_layers)?)
    } else {
        None
    };

    let all: Vec<&Graph> = supports.iter().chain(queries).copied().collect();
    let batch = GraphBatch::new(&all)?;
    let emb = embed_graphs(tape, store, ecfg, &batch, conditioning.as_ref(), drop2.as_mut())?;
    let ns = supports.len();
    let support_emb = tape.gather(emb, (0..ns).collect::<Vec<_>>())?;
    let query_emb = tape.gather(emb, (ns..all.len()).collect::<Vec<_>>())?;

    let protos = proto::compute_prototypes(tape, support_emb, n_way, k_shot)?;
    let alpha = proto::alpha(tape, store)?;
    let dist = proto::scaled_distances(tape, query_emb, protos.prototypes, alpha, cfg.metric)?;
    let log_probs = proto::class_log_probs(tape, dist)?;
    let nll = proto::nll(tape, log_probs, query_labels)?;

    let mut mixup_targets = Vec::new();
    let mixup = if opts.train && cfg.variant.has_mixup() {
        let sampled;
        let plan = match opts.mixup_plan {
            Some(p) => p,
            None => {
                let mut rng = stream(opts.key, &[purpose::MIXUP]);
                sampled = plan_mixup(n_way, k_shot, ecfg.output_dim(), &mut rng);
                &sampled
            }
        };
        let (l, t) = mixup_loss(
            tape,
            support_emb,
            protos.prototypes,
            alpha,
            k_shot,
            cfg.metric,
            plan,
            opts.mixup_targets,
        )?;
        mixup_targets = t;
        Some(l)
    } else {
        None
    };
    let penalty = if cfg.variant.has_tae() {
        Some(tae::penalty(tape, store, ecfg.n_layers)?)
    } else {
        None
    };
    Ok(EpisodeOutput {
        log_probs,
        nll,
        mixup,
        mixup_targets,
        penalty,
        support_emb,
        query_emb,
        prototypes: protos.prototypes,
    })
}

pub fn forward_episode(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    dataset: &GraphDataset,
    episode: &Episode,
    opts: ForwardOptions<'_>,
) -> Result<EpisodeOutput> {
    let pick = |idx: Vec<usize>| -> Result<Vec<&Graph>> {
        idx.into_iter()
            .map(|i| {
                dataset
                    .graphs
                    .get(i)
                    .ok_or_else(|| Error::Contract(format!("episode references graph {i} of {}", dataset.len())))
            })
            .collect()
    };
    let supports = pick(episode.support_indices())?;
    let queries = pick(episode.query_indices())?;
    forward_graphs(
        tape,
        store,
        cfg,
        &supports,
        &queries,
        &episode.query_labels,
        episode.n_way(),
        episode.k_shot(),
        opts,
    )
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy(log_probs: &crate::autodiff::Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(log_probs.row_slice(r)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
