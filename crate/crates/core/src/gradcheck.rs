//! Central-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst entry found by [`grad_check_detailed`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8_f64).max(analytic.abs() + numeric.abs())
}

/// Max relative error between the tape gradient of `f` and central
/// differences with the given step, over every entry of every param.
///
/// `f` builds a scalar on a fresh tape from param handles; it must be
/// deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_detailed(f, params, step, |_| {})?.max_rel_error)
}

/// Like [`grad_check`], with a hook that may alter the analytic gradients
/// before comparison (used to exercise the failure path).
pub fn grad_check_detailed<F, H>(
    f: F,
    params: &[Tensor],
    step: f64,
    tamper: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    H: FnOnce(&mut [Tensor]),
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let mut analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.take(v).expect("params require grad"))
        .collect();
    tamper(&mut analytic);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.data().len() {
            let orig = param.data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[k];
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
