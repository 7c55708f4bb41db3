//! Prototypical classification head.
//!
//! Prototypes are per-class support means. Queries are scored by
//! `−α·d(q, p_n)` with a learnable scale `α = exp(head.log_alpha)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{softmax_in_place, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_ALPHA: &str = "head.log_alpha";
const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    SquaredL2,
    /// Plain Euclidean distance, `sqrt(‖q − p‖² + 1e-12)`.
    L2,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::SquaredL2 => "squared-l2",
            Metric::L2 => "l2",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-l2" => Ok(Metric::SquaredL2),
            "l2" => Ok(Metric::L2),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub fn register_head_params(store: &mut ParameterStore, alpha_init: f64) -> Result<()> {
    if !(alpha_init > 0.0 && alpha_init.is_finite()) {
        return Err(Error::Config(format!("alpha init must be positive, got {alpha_init}")));
    }
    store.insert(LOG_ALPHA, Tensor::scalar(alpha_init.ln()))?;
    Ok(())
}

/// Current value of the scale `α`.
pub fn alpha_value(store: &ParameterStore) -> Result<f64> {
    let id = store.require(LOG_ALPHA)?;
    Ok(store.value(id).item().exp())
}

pub fn alpha(tape: &mut Tape, store: &ParameterStore) -> Result<Var> {
    let a = tape.param_named(store, LOG_ALPHA)?;
    tape.exp(a)
}

#[derive(Debug, Clone, Copy)]
pub struct PrototypeSet {
    /// `N × D`, row `n` is the mean of class `n`'s supports.
    pub prototypes: Var,
    /// `1 × D`, mean of the prototypes.
    pub episode_rep: Var,
}

/// `support` holds `n_way · k_shot` rows in class-major order.
pub fn compute_prototypes(tape: &mut Tape, support: Var, n_way: usize, k_shot: usize) -> Result<PrototypeSet> {
    let (rows, _) = tape.shape(support);
    if n_way == 0 || k_shot == 0 || rows != n_way * k_shot {
        return Err(Error::Contract(format!(
            "support has {rows} rows, expected N·K = {n_way}·{k_shot}"
        )));
    }
    let ptr: Arc<[usize]> = (0..=n_way).map(|n| n * k_shot).collect();
    let prototypes = tape.segment_mean(support, ptr)?;
    let episode_rep = tape.mean_rows(prototypes)?;
    Ok(PrototypeSet { prototypes, episode_rep })
}

/// `α · d(q, p)` for every query row against every prototype row.
pub fn scaled_distances(tape: &mut Tape, queries: Var, prototypes: Var, alpha: Var, metric: Metric) -> Result<Var> {
    let d = tape.pairwise_sq_dist(queries, prototypes)?;
    let d = match metric {
        Metric::SquaredL2 => d,
        Metric::L2 => {
            let d = tape.add_scalar(d, L2_EPS)?;
            tape.sqrt(d)?
        }
    };
    tape.scale_by(d, alpha)
}

pub fn class_log_probs(tape: &mut Tape, scaled_dist: Var) -> Result<Var> {
    let neg = tape.scale(scaled_dist, -1.0)?;
    tape.log_softmax(neg)
}

pub fn class_probs(tape: &mut Tape, scaled_dist: Var) -> Result<Var> {
    let neg = tape.scale(scaled_dist, -1.0)?;
    tape.softmax(neg)
}

/// Mean negative log-likelihood of `labels` under row-wise `log_probs`.
pub fn nll(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = tape.shape(log_probs);
    if labels.len() != rows {
        return Err(Error::Contract(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Contract(format!("label {bad} out of range for {cols} classes")));
    }
    let picked = tape.pick_cols(log_probs, labels.to_vec())?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

pub fn distance(q: &[f64], p: &[f64], metric: Metric) -> f64 {
    let sq: f64 = q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
    match metric {
        Metric::SquaredL2 => sq,
        Metric::L2 => (sq + L2_EPS).sqrt(),
    }
}

/// `α · ‖q − p‖²`.
pub fn scaled_sq_l2(q: &[f64], p: &[f64], alpha: f64) -> f64 {
    alpha * distance(q, p, Metric::SquaredL2)
}

/// Softmax over `−α · d(q, p_n)` for a single query.
pub fn class_distribution(q: &[f64], prototypes: &[Vec<f64>], alpha: f64, metric: Metric) -> Vec<f64> {
    let mut z: Vec<f64> = prototypes.iter().map(|p| -alpha * distance(q, p, metric)).collect();
    softmax_in_place(&mut z);
    z
}

/// `−log ρ[label]`.
pub fn nll_value(rho: &[f64], label: usize) -> Result<f64> {
    let p = *rho
        .get(label)
        .ok_or_else(|| Error::Contract(format!("label {label} out of range for {} classes", rho.len())))?;
    let v = -p.ln();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFault(format!("nll of probability {p}")))
    }
}
