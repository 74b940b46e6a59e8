//! Central-finite-difference gradient verification.
//!
//! The checker reruns a deterministic loss closure with each parameter entry
//! nudged by ±eps and compares the resulting slope against the analytic
//! gradient from `Tape::backward`. Only listed parameters are perturbed and
//! reported; constants feeding the closure are out of scope.

use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};

/// Per-parameter outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0f64, |m, p| m.max(p.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn print(&self) {
        for p in &self.params {
            let status = if p.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            println!(
                "  {:<28} entries {:>5}  max rel err {:>10.3e}  {}",
                p.name, p.entries, p.max_rel_err, status
            );
        }
        println!(
            "gradcheck: overall max rel err {:.3e} (tol {:.1e}) -> {}",
            self.max_rel_err(),
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        );
    }
}

/// Relative error with a floor so that near-zero pairs compare as equal.
fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Checks analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` must be deterministic given the store contents: it builds the
/// forward pass on the supplied tape and returns the scalar loss node.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    loss_fn: F,
    eps: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> VarId,
{
    // Analytic pass.
    store.zero_grad(ids);
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    tape.backward(loss, store);
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).data.clone()).collect();

    let mut params = Vec::with_capacity(ids.len());
    for (slot, &id) in ids.iter().enumerate() {
        let n = store.value(id).numel();
        let mut max_rel = 0.0f64;
        for i in 0..n {
            let orig = store.value(id).data[i];

            store.value_mut(id).data[i] = orig + eps;
            let mut tp = Tape::new();
            let lp = loss_fn(&mut tp, store);
            let fp = tp.value(lp).data[0];

            store.value_mut(id).data[i] = orig - eps;
            let mut tm = Tape::new();
            let lm = loss_fn(&mut tm, store);
            let fm = tm.value(lm).data[0];

            store.value_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            max_rel = max_rel.max(rel_err(analytic[slot][i], numeric));
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            entries: n,
            max_rel_err: max_rel,
        });
    }
    GradCheckReport { params, tol }
}
