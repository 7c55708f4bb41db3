//! GIN graph embedder.
//!
//! Per layer `ℓ`: `h ← relu(MLP((1 + ε)·h + Σ_{u∈N(v)} h_u))`, optionally
//! conditioned as `γ ⊙ h + β`, then dropout. The MLP is
//! `Linear → (GraphNorm → relu → Linear)*`. Layer outputs are concatenated
//! (jumping knowledge) and pooled per graph.
//!
//! Parameter names: `embedder.layer{ℓ}.{epsilon|mlp.{i}.{w|b}|gn.{i}.{alpha|gamma|beta}}`
//! and `embedder.pool.halve.{w|b}`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;

pub const GRAPH_NORM_EPS: f64 = 1e-5;
pub const POOL_STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
    /// Halve the channels with a learned map, then concatenate per-graph
    /// mean and population standard deviation.
    MeanVar,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
            Pooling::MeanVar => "mean+var",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            "mean+var" => Ok(Pooling::MeanVar),
            _ => Err(Error::Config(format!("unknown pooling `{s}`"))),
        }
    }
}

impl Serialize for Pooling {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pooling {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub n_layers: usize,
    /// Width of every layer's output block.
    pub hidden_dim: usize,
    pub mlp_layers: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            n_layers: 2,
            hidden_dim: 64,
            mlp_layers: 2,
            dropout: 0.0,
            pooling: Pooling::Mean,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim == 0 || self.mlp_layers == 0 {
            return Err(Error::Config(
                "embedder needs at least one layer, one MLP layer and a positive hidden width".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.pooling == Pooling::MeanVar && !self.concat_dim().is_multiple_of(2) {
            return Err(Error::Config("mean+var pooling needs an even embedding width".into()));
        }
        Ok(())
    }

    /// Width of the jumping-knowledge node embedding.
    pub fn concat_dim(&self) -> usize {
        self.n_layers * self.hidden_dim
    }

    /// Width of the pooled graph embedding.
    pub fn output_dim(&self) -> usize {
        self.concat_dim()
    }
}

pub fn layer_prefix(l: usize) -> String {
    format!("embedder.layer{l}")
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Registers a `Linear(fan_in → fan_out)` as `{prefix}.w` / `{prefix}.b`,
/// both drawn from `U(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn register_linear(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Result<()> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for (suffix, rows) in [("w", fan_in), ("b", 1)] {
        let name = format!("{prefix}.{suffix}");
        let mut rng = crate::rng::stream(seed, &[crate::rng::purpose::INIT, crate::rng::name_hash(&name)]);
        store.insert(name, uniform(rows, fan_out, bound, &mut rng))?;
    }
    Ok(())
}

pub(crate) fn linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param_named(store, &format!("{prefix}.w"))?;
    let b = tape.param_named(store, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn register_embedder_params(store: &mut ParameterStore, cfg: &EmbedderConfig, d_in: usize, seed: u64) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden_dim;
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        store.insert(format!("{p}.epsilon"), Tensor::scalar(0.0))?;
        let layer_in = if l == 0 { d_in } else { h };
        for i in 0..cfg.mlp_layers {
            let fan_in = if i == 0 { layer_in } else { h };
            register_linear(store, &format!("{p}.mlp.{i}"), fan_in, h, seed)?;
        }
        for i in 0..cfg.mlp_layers - 1 {
            store.insert(format!("{p}.gn.{i}.alpha"), Tensor::filled(1, h, 1.0))?;
            store.insert(format!("{p}.gn.{i}.gamma"), Tensor::filled(1, h, 1.0))?;
            store.insert(format!("{p}.gn.{i}.beta"), Tensor::zeros(1, h))?;
        }
    }
    if cfg.pooling == Pooling::MeanVar {
        let d = cfg.concat_dim();
        let mut w = Tensor::zeros(d, d / 2);
        for i in 0..d / 2 {
            w.set(i, i, 1.0);
        }
        store.insert("embedder.pool.halve.w", w)?;
        store.insert("embedder.pool.halve.b", Tensor::zeros(1, d / 2))?;
    }
    Ok(())
}

/// Several graphs packed into one disjoint-union node matrix.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Tensor,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// Node offsets: graph `g` owns rows `graph_ptr[g]..graph_ptr[g+1]`.
    pub graph_ptr: Arc<[usize]>,
    pub node_graph: Arc<[usize]>,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Result<Self> {
        let d_in = graphs.first().map_or(0, |g| g.d_in());
        let n: usize = graphs.iter().map(|g| g.node_count()).sum();
        let mut data = Vec::with_capacity(n * d_in);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut ptr = Vec::with_capacity(graphs.len() + 1);
        let mut node_graph = Vec::with_capacity(n);
        ptr.push(0);
        let mut off = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.d_in() != d_in || g.features.rows() != g.node_count() {
                return Err(Error::Contract(format!(
                    "graph {gi} has features {:?}, expected {} × {d_in}",
                    g.features.shape(),
                    g.node_count()
                )));
            }
            data.extend_from_slice(g.features.data());
            for (u, v) in g.directed_edges() {
                src.push(off + u);
                dst.push(off + v);
            }
            node_graph.extend(std::iter::repeat_n(gi, g.node_count()));
            off += g.node_count();
            ptr.push(off);
        }
        Ok(GraphBatch {
            features: Tensor::from_vec(n, d_in, data)?,
            src: src.into(),
            dst: dst.into(),
            graph_ptr: ptr.into(),
            node_graph: node_graph.into(),
        })
    }

    pub fn n_graphs(&self) -> usize {
        self.graph_ptr.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Per-graph GraphNorm: `γ·(h − α·μ)/sqrt(σ² + 1e-5) + β` where `σ²` is the
/// within-graph variance of `h − α·μ`.
pub fn graph_norm(tape: &mut Tape, h: Var, batch: &GraphBatch, alpha: Var, gamma: Var, beta: Var) -> Result<Var> {
    let mu = tape.segment_mean(h, batch.graph_ptr.clone())?;
    let mu_rows = tape.gather(mu, batch.node_graph.clone())?;
    let shift = tape.mul_row(mu_rows, alpha)?;
    let centered = tape.sub(h, shift)?;
    let sq = tape.square(centered)?;
    let var = tape.segment_mean(sq, batch.graph_ptr.clone())?;
    let var = tape.add_scalar(var, GRAPH_NORM_EPS)?;
    let std = tape.sqrt(var)?;
    let std_rows = tape.gather(std, batch.node_graph.clone())?;
    let normed = tape.div(centered, std_rows)?;
    let scaled = tape.mul_row(normed, gamma)?;
    tape.add_row(scaled, beta)
}

/// One GIN convolution, `MLP((1 + ε)·h_v + Σ_{u∈N(v)} h_u)`, without the
/// outer activation.
pub fn gin_layer_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EmbedderConfig,
    layer: usize,
    h: Var,
    batch: &GraphBatch,
) -> Result<Var> {
    let p = layer_prefix(layer);
    let (rows, _) = tape.shape(h);
    if rows != batch.n_nodes() {
        return Err(Error::Contract(format!(
            "layer input has {rows} rows for {} nodes",
            batch.n_nodes()
        )));
    }
    let eps = tape.param_named(store, &format!("{p}.epsilon"))?;
    let neigh = tape.scatter_add(h, batch.src.clone(), batch.dst.clone(), batch.n_nodes())?;
    let self_term = tape.scale_by(h, eps)?;
    let self_term = tape.add(self_term, h)?;
    let mut x = tape.add(self_term, neigh)?;
    for i in 0..cfg.mlp_layers {
        if i > 0 {
            let alpha = tape.param_named(store, &format!("{p}.gn.{}.alpha", i - 1))?;
            let gamma = tape.param_named(store, &format!("{p}.gn.{}.gamma", i - 1))?;
            let beta = tape.param_named(store, &format!("{p}.gn.{}.beta", i - 1))?;
            x = graph_norm(tape, x, batch, alpha, gamma, beta)?;
            x = tape.relu(x)?;
        }
        x = linear(tape, store, &format!("{p}.mlp.{i}"), x)?;
    }
    Ok(x)
}

/// Pools node rows to one vector per graph.
pub fn global_pool(tape: &mut Tape, store: &ParameterStore, h: Var, batch: &GraphBatch, mode: Pooling) -> Result<Var> {
    match mode {
        Pooling::Mean => tape.segment_mean(h, batch.graph_ptr.clone()),
        Pooling::Sum => tape.segment_sum(h, batch.graph_ptr.clone()),
        Pooling::MeanVar => {
            let z = linear(tape, store, "embedder.pool.halve", h)?;
            mean_std_pool(tape, z, batch)
        }
    }
}

/// Concatenated per-graph mean and population std of `z`'s rows.
pub fn mean_std_pool(tape: &mut Tape, z: Var, batch: &GraphBatch) -> Result<Var> {
    let mean = tape.segment_mean(z, batch.graph_ptr.clone())?;
    let std = tape.segment_std(z, &batch.graph_ptr, &batch.node_graph, POOL_STD_EPS)?;
    tape.concat_cols(&[mean, std])
}

/// Per-layer `(γ, β)` rows, each `1 × hidden_dim`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub layers: Vec<(Var, Var)>,
}

/// Embeds every graph of `batch`; returns an `n_graphs × output_dim` matrix.
///
/// `dropout` is applied only when an rng is supplied (train mode).
pub fn embed_graphs(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EmbedderConfig,
    batch: &GraphBatch,
    conditioning: Option<&Conditioning>,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    if let Some(c) = conditioning {
        if c.layers.len() != cfg.n_layers {
            return Err(Error::Contract(format!(
                "conditioning has {} layers, embedder has {}",
                c.layers.len(),
                cfg.n_layers
            )));
        }
        for &(g, b) in &c.layers {
            if tape.shape(g) != (1, cfg.hidden_dim) || tape.shape(b) != (1, cfg.hidden_dim) {
                return Err(Error::Contract(format!(
                    "conditioning width must be {} (got γ {:?}, β {:?})",
                    cfg.hidden_dim,
                    tape.shape(g),
                    tape.shape(b)
                )));
            }
        }
    }
    let mut h = tape.constant(batch.features.clone())?;
    let mut outs = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let x = gin_layer_forward(tape, store, cfg, l, h, batch)?;
        let mut x = tape.relu(x)?;
        if let Some(c) = conditioning {
            let (gamma, beta) = c.layers[l];
            x = tape.mul_row(x, gamma)?;
            x = tape.add_row(x, beta)?;
        }
        if let Some(rng) = dropout.as_deref_mut() {
            if cfg.dropout > 0.0 {
                let keep = 1.0 - cfg.dropout;
                let (r, c) = tape.shape(x);
                let mask: Vec<f64> = (0..r * c)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.constant(Tensor::from_vec(r, c, mask)?)?;
                x = tape.mul(x, m)?;
            }
        }
        outs.push(x);
        h = x;
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    global_pool(tape, store, cat, batch, cfg.pooling)
}
