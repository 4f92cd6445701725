//! Central finite-difference gradient checking in 64-bit arithmetic.

use crate::error::Result;
use crate::numcore::{Tape, Tensor, Var};

/// Relative tolerance used by every gradient check in this crate.
pub const REL_TOL: f64 = 1e-4;
/// Absolute tolerance for coordinates whose gradient is near zero.
pub const ABS_TOL: f64 = 1e-6;
/// Finite-difference step.
pub const STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares the tape gradient of `loss_fn` against central differences for
/// every coordinate of every tensor in `params`.
///
/// `loss_fn` receives a fresh tape and one leaf per parameter tensor, and
/// must return a scalar node.
pub fn check<F>(params: &[Tensor<f64>], loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for c in 0..p.len() {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + STEP;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - STEP;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[pi][c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.coordinates += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > ABS_TOL {
                report.max_rel_err = report.max_rel_err.max(rel);
            }
            if abs > ABS_TOL && rel > REL_TOL {
                report.mismatches.push(Mismatch {
                    param: pi,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
