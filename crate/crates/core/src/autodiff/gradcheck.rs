use serde::Serialize;

use super::params::{GradBuffer, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// `(parameter, flat index)` pairs whose probe crossed a relu kink.
    pub excluded: Vec<(String, usize)>,
    pub max_rel_err: f64,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{}, max rel err {:.3e} (tol {:.1e}, step {:.1e}, {} params, {} excluded points)",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.step,
            self.params.len(),
            self.excluded.len()
        )?;
        for p in &self.params {
            writeln!(
                f,
                "  {:<40} {:.3e}  ({} checked, {} excluded)",
                p.name, p.max_rel_err, p.checked, p.excluded
            )?;
        }
        Ok(())
    }
}

fn eval<F>(f: &F, store: &ParameterStore) -> Result<(f64, (u64, usize))>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_kinks(true);
    let loss = f(store, &mut tape)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok((v.item(), tape.kink_signature()))
}

/// Checks every scalar of every parameter: relative error is
/// `|g_ad − g_fd| / max(1, |g_fd|)` and the check passes iff all are `≤ tol`.
///
/// Coordinates whose `±step` probes change the relu activation pattern are
/// excluded and listed rather than failed.
pub fn finite_diff_check<F>(f: F, store: &ParameterStore, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_kinks(true);
    let loss = f(store, &mut tape)?;
    let base = tape.value(loss).item();
    let base_sig = tape.kink_signature();
    let mut analytic = GradBuffer::zeros_like(store);
    tape.backward_into(loss, &mut analytic)?;

    let (again, _) = eval(&f, store)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Verifier(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut work = store.clone();
    let mut params = Vec::new();
    let mut excluded = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for id in store.ids() {
        let name = store.name(id).to_string();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            checked: 0,
            excluded: 0,
        };
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + step;
            let (plus, sig_p) = eval(&f, &work)?;
            work.value_mut(id).data_mut()[k] = orig - step;
            let (minus, sig_m) = eval(&f, &work)?;
            work.value_mut(id).data_mut()[k] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                check.excluded += 1;
                excluded.push((name.clone(), k));
                continue;
            }
            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic.get(id).data()[k];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.checked += 1;
        }
        max_rel_err = max_rel_err.max(check.max_rel_err);
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        excluded,
        max_rel_err,
        step,
        tol,
        passed: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor::from_vec(2, 2, vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        let report = finite_diff_check(
            |s, t| {
                let w = t.param_named(s, "w")?;
                let sq = t.square(w)?;
                let sq = t.scale(sq, 1.5)?;
                t.sum(sq)
            },
            &store,
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(report.passed, "{report}");
        assert!(report.max_rel_err <= 1e-10);
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::row(vec![0.0, 1.0])).unwrap();
        let report = finite_diff_check(
            |s, t| {
                let x = t.param_named(s, "x")?;
                let r = t.relu(x)?;
                t.sum(r)
            },
            &store,
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.excluded, vec![("x".to_string(), 0)]);
        assert_eq!(report.params[0].checked, 1);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = finite_diff_check(
            |s, t| {
                calls.set(calls.get() + 1.0);
                let x = t.param_named(s, "x")?;
                t.scale(x, calls.get())
            },
            &store,
            1e-4,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Verifier(_)));
    }
}
