//! Gated latent MixUp regularizer.
//!
//! For every unordered class pair `(n₁, n₂)` one support of each class is
//! drawn and mixed channel-wise with a Bernoulli(0.5) mask `σ`:
//! `s̃ = σ ⊙ s₁ + (1 − σ) ⊙ s₂`. The mixed sample's class distribution is
//! pulled towards `λ ρ₁ + (1 − λ) ρ₂` where `λ = Σσ / D`. Targets are held
//! constant; gradient flows through `ρ(s̃)` only.

use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::proto::{class_distribution, scaled_distances, Metric};
use crate::rng::Rng;

pub fn sample_mask(d: usize, rng: &mut Rng) -> Vec<bool> {
    (0..d).map(|_| rng.gen_bool(0.5)).collect()
}

/// Returns the mixed vector and `λ = Σσ / D`.
pub fn mix_embeddings(s1: &[f64], s2: &[f64], sigma: &[bool]) -> Result<(Vec<f64>, f64)> {
    if s1.len() != s2.len() || s1.len() != sigma.len() || s1.is_empty() {
        return Err(Error::Contract(format!(
            "mix of widths {}, {} with mask {}",
            s1.len(),
            s2.len(),
            sigma.len()
        )));
    }
    let mixed = sigma
        .iter()
        .zip(s1.iter().zip(s2))
        .map(|(&m, (&a, &b))| if m { a } else { b })
        .collect();
    let lambda = sigma.iter().filter(|&&m| m).count() as f64 / sigma.len() as f64;
    Ok((mixed, lambda))
}

/// `λ ρ₁ + (1 − λ) ρ₂`, evaluated from the nearer endpoint so that `λ ∈ {0, 1}`
/// and `ρ₁ = ρ₂` reproduce the input exactly.
pub fn mixup_target(rho1: &[f64], rho2: &[f64], lambda: f64) -> Vec<f64> {
    rho1.iter()
        .zip(rho2)
        .map(|(&a, &b)| if lambda >= 0.5 { a + (1.0 - lambda) * (b - a) } else { b + lambda * (a - b) })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixPair {
    pub class1: usize,
    pub shot1: usize,
    pub class2: usize,
    pub shot2: usize,
    pub mask: Vec<bool>,
}

/// One mixed sample per unordered class pair, in `(n₁ < n₂)` lexicographic
/// order.
pub fn plan_mixup(n_way: usize, k_shot: usize, d: usize, rng: &mut Rng) -> Vec<MixPair> {
    let mut plan = Vec::with_capacity(n_way * n_way.saturating_sub(1) / 2);
    for class1 in 0..n_way {
        for class2 in class1 + 1..n_way {
            let shot1 = rng.gen_range(0..k_shot);
            let shot2 = rng.gen_range(0..k_shot);
            let mask = sample_mask(d, rng);
            plan.push(MixPair {
                class1,
                shot1,
                class2,
                shot2,
                mask,
            });
        }
    }
    plan
}

/// Mean over pairs of `‖ρ(s̃) − ρ̃‖²`, plus the row-major `pairs × N`
/// targets used. `frozen_targets` replaces the targets computed from the
/// current values. Zero for a one-way episode.
#[allow(clippy::too_many_arguments)]
pub fn mixup_loss(
    tape: &mut Tape,
    support: Var,
    prototypes: Var,
    alpha: Var,
    k_shot: usize,
    metric: Metric,
    plan: &[MixPair],
    frozen_targets: Option<&[f64]>,
) -> Result<(Var, Vec<f64>)> {
    if plan.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0))?, Vec::new()));
    }
    let s_val = tape.value(support).clone();
    let p_val = tape.value(prototypes).clone();
    let a_val = tape.value(alpha).item();
    let d = s_val.cols();
    let protos: Vec<Vec<f64>> = (0..p_val.rows()).map(|r| p_val.row_slice(r).to_vec()).collect();

    let mut idx1 = Vec::with_capacity(plan.len());
    let mut idx2 = Vec::with_capacity(plan.len());
    let mut mask = Vec::with_capacity(plan.len() * d);
    let mut targets: Vec<f64> = Vec::with_capacity(plan.len() * protos.len());
    for pair in plan {
        if pair.mask.len() != d || pair.shot1 >= k_shot || pair.shot2 >= k_shot {
            return Err(Error::Contract("mixup plan does not fit the episode".into()));
        }
        let (r1, r2) = (pair.class1 * k_shot + pair.shot1, pair.class2 * k_shot + pair.shot2);
        if r1 >= s_val.rows() || r2 >= s_val.rows() {
            return Err(Error::Contract("mixup plan does not fit the episode".into()));
        }
        idx1.push(r1);
        idx2.push(r2);
        mask.extend(pair.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        let rho1 = class_distribution(s_val.row_slice(r1), &protos, a_val, metric);
        let rho2 = class_distribution(s_val.row_slice(r2), &protos, a_val, metric);
        let lambda = pair.mask.iter().filter(|&&m| m).count() as f64 / d as f64;
        targets.extend(mixup_target(&rho1, &rho2, lambda));
    }
    let p = plan.len();
    if let Some(t) = frozen_targets {
        if t.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} frozen mixup targets, expected {}",
                t.len(),
                targets.len()
            )));
        }
        targets = t.to_vec();
    }
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let s1 = tape.gather(support, Arc::<[usize]>::from(idx1))?;
    let s2 = tape.gather(support, Arc::<[usize]>::from(idx2))?;
    let m = tape.constant(Tensor::from_vec(p, d, mask)?)?;
    let mi = tape.constant(Tensor::from_vec(p, d, inv)?)?;
    let a = tape.mul(s1, m)?;
    let b = tape.mul(s2, mi)?;
    let mixed = tape.add(a, b)?;
    let dist = scaled_distances(tape, mixed, prototypes, alpha, metric)?;
    let neg = tape.scale(dist, -1.0)?;
    let rho = tape.softmax(neg)?;
    let target = tape.constant(Tensor::from_vec(p, protos.len(), targets.clone())?)?;
    let diff = tape.sub(rho, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    Ok((tape.scale(total, 1.0 / p as f64)?, targets))
}
