//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the computation from scratch for every perturbed
//! coordinate (central differences), so it is independent of the backward
//! implementation it is checking. Callers that route through piecewise
//! functions (relu kinks, hard top-k selection) are responsible for choosing
//! inputs away from the decision boundaries; [`crate::tensor::Tape::min_relu_abs`]
//! and routing margins exist for exactly that.

use crate::error::Result;
use crate::tensor::{Tape, TensorId};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Floor for the relative-error denominator, so coordinates whose true
/// gradient is ~0 are compared at a sensible absolute scale instead of
/// dividing by zero.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Worst coordinate found by a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoord {
    /// Index of the parameter block.
    pub param: usize,
    /// Flat coordinate within that block.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Total scalar coordinates checked.
    pub coords: usize,
    /// max over coordinates of |analytic - numeric| / max(|analytic| + |numeric|, floor).
    pub max_rel_err: f64,
    pub worst: Option<WorstCoord>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floored denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare analytic gradients against central finite differences for every
/// coordinate of every parameter block.
///
/// `build` receives a fresh tape plus one leaf per parameter block (in order)
/// and must return a single-element loss node. It is called once with
/// differentiable leaves to collect analytic gradients, then twice per
/// coordinate with frozen leaves for the two-sided numeric estimate.
pub fn grad_check<F>(
    params: &[(Vec<f64>, Vec<usize>)],
    fd_step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Vec<f64>], with_grad: bool| -> Result<(Tape, TensorId)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(values.len());
        for (vals, (_, shape)) in values.iter().zip(params) {
            ids.push(tape.leaf(vals.clone(), shape, with_grad)?);
        }
        let loss = build(&mut tape, &ids)?;
        Ok((tape, loss))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|(v, _)| v.clone()).collect();

    // Analytic pass.
    let (mut tape, loss) = eval(&base, true)?;
    tape.backward(loss)?;
    let leaf_count = params.len();
    let analytic: Vec<Vec<f64>> = (0..leaf_count)
        .map(|i| {
            tape.grad(i)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; base[i].len()])
        })
        .collect();

    // Numeric sweep.
    let mut work = base.clone();
    let mut report = GradCheckReport {
        coords: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for p in 0..leaf_count {
        for c in 0..base[p].len() {
            let orig = work[p][c];
            work[p][c] = orig + fd_step;
            let (tape_plus, loss_plus) = eval(&work, false)?;
            let f_plus = tape_plus.value(loss_plus);
            work[p][c] = orig - fd_step;
            let (tape_minus, loss_minus) = eval(&work, false)?;
            let f_minus = tape_minus.value(loss_minus);
            work[p][c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * fd_step);
            let a = analytic[p][c];
            let rel = relative_error(a, numeric);
            report.coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoord {
                    param: p,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
