//! Finite-difference verification of recorded gradients.
//!
//! The numeric side never touches the tape: it re-evaluates the forward
//! function at symmetrically perturbed inputs and forms central differences,
//! so it stays an independent oracle for the analytic backward passes.

use super::{Tape, Tensor};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Absolute floor under the relative-error denominator.
pub const FD_FLOOR: f64 = 1e-6;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest relative error over every coordinate of every input.
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where it occurred.
    pub worst: (usize, usize),
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
    /// Total coordinates compared.
    pub coords: usize,
}

impl GradReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Compare the tape gradient of `build` against central differences.
///
/// `build` receives leaves created from `inputs` (value slice + shape per
/// input) and must return a scalar loss. The analytic gradient comes from
/// one backward pass; the numeric gradient re-runs the forward at x ± h for
/// every coordinate of every input.
pub fn check_gradient(
    inputs: &[(&[f64], &[usize])],
    build: &dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<GradReport> {
    // analytic side
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(v, s)| tape.leaf(v.to_vec(), s))
        .collect();
    let loss = build(&leaves)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    // numeric side: all inputs as plain constants, one coordinate perturbed
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let consts: Vec<Tensor> = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, s))| Tensor::constant(v.clone(), s))
            .collect();
        Ok(build(&consts)?.item())
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.to_vec()).collect();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_pair: (0.0, 0.0),
        coords: 0,
    };
    for (ti, vals) in base.iter().enumerate() {
        for ci in 0..vals.len() {
            let mut plus = base.clone();
            plus[ti][ci] += FD_STEP;
            let mut minus = base.clone();
            minus[ti][ci] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[ti][ci];
            let e = rel_err(a, numeric);
            report.coords += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (ti, ci);
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}
