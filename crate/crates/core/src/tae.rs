//! Task-adaptive embedding.
//!
//! Two task-embedding networks map the episode representation `p_e` to
//! per-layer scale and shift vectors:
//! `γ_ℓ = γ₀_ℓ · h_ℓ(p_e) + 1`, `β_ℓ = β₀_ℓ · g_ℓ(p_e)`.
//! Each network has a residual trunk `z = p_e + relu(W p_e + b)` followed
//! by one linear head per embedder layer.

use crate::autodiff::{ParameterStore, Tape, Tensor, Var};
use crate::embedder::{linear, register_linear, Conditioning};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaeConfig {
    /// Width of `p_e`.
    pub d: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub gamma0_init: f64,
    pub beta0_init: f64,
}

pub fn gamma0_name(l: usize) -> String {
    format!("tae.layer{l}.gamma0")
}

pub fn beta0_name(l: usize) -> String {
    format!("tae.layer{l}.beta0")
}

pub fn register_tae_params(store: &mut ParameterStore, cfg: &TaeConfig, seed: u64) -> Result<()> {
    for net in ["g", "h"] {
        register_linear(store, &format!("tae.{net}.trunk"), cfg.d, cfg.d, seed)?;
        for l in 0..cfg.n_layers {
            register_linear(store, &format!("tae.{net}.head{l}"), cfg.d, cfg.hidden_dim, seed)?;
        }
    }
    for l in 0..cfg.n_layers {
        store.insert(gamma0_name(l), Tensor::scalar(cfg.gamma0_init))?;
        store.insert(beta0_name(l), Tensor::scalar(cfg.beta0_init))?;
    }
    Ok(())
}

fn ten_forward(tape: &mut Tape, store: &ParameterStore, net: &str, p_e: Var, n_layers: usize) -> Result<Vec<Var>> {
    let t = linear(tape, store, &format!("tae.{net}.trunk"), p_e)?;
    let t = tape.relu(t)?;
    let z = tape.add(p_e, t)?;
    (0..n_layers)
        .map(|l| linear(tape, store, &format!("tae.{net}.head{l}"), z))
        .collect()
}

/// Per-layer `(γ, β)` from the episode representation `p_e` (`1 × d`).
pub fn conditioning(tape: &mut Tape, store: &ParameterStore, p_e: Var, n_layers: usize) -> Result<Conditioning> {
    if tape.shape(p_e).0 != 1 {
        return Err(Error::Contract(format!(
            "episode representation must be one row, got {:?}",
            tape.shape(p_e)
        )));
    }
    let h = ten_forward(tape, store, "h", p_e, n_layers)?;
    let g = ten_forward(tape, store, "g", p_e, n_layers)?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let gamma0 = tape.param_named(store, &gamma0_name(l))?;
        let beta0 = tape.param_named(store, &beta0_name(l))?;
        let gamma = tape.scale_by(h[l], gamma0)?;
        let gamma = tape.add_scalar(gamma, 1.0)?;
        let beta = tape.scale_by(g[l], beta0)?;
        layers.push((gamma, beta));
    }
    Ok(Conditioning { layers })
}

/// `Σ_ℓ γ₀_ℓ² + β₀_ℓ²`.
pub fn penalty(tape: &mut Tape, store: &ParameterStore, n_layers: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * n_layers);
    for l in 0..n_layers {
        for name in [gamma0_name(l), beta0_name(l)] {
            let v = tape.param_named(store, &name)?;
            terms.push(tape.square(v)?);
        }
    }
    let cat = tape.concat_cols(&terms)?;
    tape.sum(cat)
}

/// Scalar form of the penalty.
pub fn penalty_value(gamma0: &[f64], beta0: &[f64]) -> f64 {
    gamma0.iter().chain(beta0).map(|v| v * v).sum()
}
