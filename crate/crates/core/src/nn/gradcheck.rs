//! Central finite-difference verification of analytic gradients.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::{Grads, Params};

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub tol: f64,
    /// (parameter name, flat entry index) of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn(params, want_grads)` evaluates the scalar loss, returning
/// gradients only when asked. Each parameter is probed at every entry, or at
/// `max_entries_per_param` randomly chosen ones when it is larger; callers
/// pick that budget so the total stays at or above ~100 entries. The relative
/// error is |fd - analytic| / max(|fd|, |analytic|, 1e-6).
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &mut Params,
    h: f64,
    tol: f64,
    max_entries_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&Params, bool) -> Result<(f64, Option<Grads>)>,
{
    let (loss0, grads) = loss_fn(params, true)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: loss is {loss0}")));
    }
    let grads = grads.ok_or_else(|| {
        Error::Config("grad_check: loss_fn returned no gradients".into())
    })?;

    let mut report = GradCheckReport { max_rel_err: 0.0, n_checked: 0, tol, worst: None };
    for pidx in 0..params.len() {
        let len = params.at(pidx).value.len();
        let probes: Vec<usize> = if len <= max_entries_per_param {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, max_entries_per_param).into_vec()
        };
        for i in probes {
            let orig = params.at(pidx).value.data[i];
            params.at_mut(pidx).value.data[i] = orig + h;
            let plus = loss_fn(params, false)?.0;
            params.at_mut(pidx).value.data[i] = orig - h;
            let minus = loss_fn(params, false)?.0;
            params.at_mut(pidx).value.data[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: perturbed loss not finite at {:?}[{i}]",
                    params.at(pidx).name
                )));
            }
            let fd = (plus - minus) / (2.0 * h);
            let analytic = grads.get(pidx).map_or(0.0, |t| t.data[i]);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.at(pidx).name.clone(), i));
            }
        }
    }
    Ok(report)
}
