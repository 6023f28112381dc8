//! Central finite-difference gradient verification.
//!
//! The oracle: for each checked coordinate, evaluate the loss at `x ± eps`
//! (fresh no-grad tapes) and compare `(f(x+eps) - f(x-eps)) / (2 eps)`
//! against the analytic gradient using the symmetric relative error
//! `|a - c| / (|a| + |c| + 1e-12)`.

use super::params::ParamSet;
use super::{Result, Tape, TensorError, TensorId};
use crate::rng;

/// Worst-coordinate summary from [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub central_at_worst: f64,
    pub coords_checked: usize,
}

/// Verify the analytic gradient of `f` (a scalar function of the bound
/// parameters) at the point stored in `params`.
///
/// `max_coords_per_tensor = None` checks every coordinate; `Some(n)` checks a
/// seeded random subset of `n` per tensor. Errors if any analytic or central
/// value is non-finite.
pub fn grad_check<F>(
    params: &ParamSet,
    f: F,
    eps: f64,
    max_coords_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &super::params::Bound) -> Result<TensorId>,
{
    // Analytic pass.
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| grads.get_or_zeros(bound.id_at(i), params.values(i).len()))
        .collect();

    let eval = |point: &ParamSet| -> Result<f64> {
        let t = Tape::new();
        let b = point.bind_frozen(&t);
        let l = f(&t, &b)?;
        let v = t.value_scalar(l);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { context: "grad_check probe loss".into() });
        }
        Ok(v)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        analytic_at_worst: 0.0,
        central_at_worst: 0.0,
        coords_checked: 0,
    };

    for i in 0..params.len() {
        let n = params.values(i).len();
        let coords: Vec<usize> = match max_coords_per_tensor {
            Some(limit) if limit < n => {
                let mut r = rng::stream(seed, &format!("gradcheck/{}", params.name(i)));
                let mut all: Vec<usize> = (0..n).collect();
                rng::shuffle(&mut r, &mut all);
                all.truncate(limit);
                all
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params.values(i)[c];
            probe.values_mut(i)[c] = orig + eps;
            let hi = eval(&probe)?;
            probe.values_mut(i)[c] = orig - eps;
            let lo = eval(&probe)?;
            probe.values_mut(i)[c] = orig;

            let central = (hi - lo) / (2.0 * eps);
            let a = analytic[i][c];
            if !a.is_finite() || !central.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("grad_check at {}[{c}]", params.name(i)),
                });
            }
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(i).to_string();
                report.worst_coord = c;
                report.analytic_at_worst = a;
                report.central_at_worst = central;
            }
        }
    }
    Ok(report)
}
