//! Central-difference verification of tape gradients.

use std::collections::BTreeMap;
use std::fmt;

use crate::numerics::{Matrix, Tape, Var};

/// Named parameter values.
pub type ParamSet = BTreeMap<String, Matrix>;

/// Below this magnitude the comparison switches to absolute error.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub worst: Option<CoordinateError>,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "ok" } else { "FAILED" };
        write!(
            f,
            "gradcheck {status}: max error {:.3e} over {} coordinates (tol {:.1e})",
            self.max_error, self.coordinates, self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst {}[{},{}] analytic {:.6e} numeric {:.6e}",
                w.param, w.row, w.col, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Relative error with absolute fallback for tiny magnitudes.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let mag = analytic.abs().max(numeric.abs());
    if mag < ABS_FALLBACK {
        diff
    } else {
        diff / mag
    }
}

fn evaluate<F>(f: &F, params: &ParamSet) -> f64
where
    F: Fn(&Tape, &BTreeMap<String, Var>) -> Var,
{
    let tape = Tape::new();
    let vars = register(&tape, params);
    let loss = f(&tape, &vars);
    tape.scalar(loss)
}

fn register(tape: &Tape, params: &ParamSet) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(k, m)| (k.clone(), tape.param(k, m)))
        .collect()
}

/// Compares tape gradients of the scalar `f` against central differences
/// at every coordinate of every parameter.
///
/// `f` receives a fresh tape with all `params` registered under their names
/// and must return a 1x1 node.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Tape, &BTreeMap<String, Var>) -> Var,
{
    let tape = Tape::new();
    let vars = register(&tape, params);
    let loss = f(&tape, &vars);
    let grads = tape
        .backward(loss)
        .expect("grad_check objective must return a 1x1 node");

    let mut worst: Option<CoordinateError> = None;
    let mut coordinates = 0;
    let mut probe = params.clone();
    for (name, value) in params {
        let analytic = grads.get(name).expect("registered");
        for idx in 0..value.len() {
            let orig = value.data()[idx];
            probe.get_mut(name).expect("cloned").data_mut()[idx] = orig + eps;
            let up = evaluate(&f, &probe);
            probe.get_mut(name).expect("cloned").data_mut()[idx] = orig - eps;
            let down = evaluate(&f, &probe);
            probe.get_mut(name).expect("cloned").data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[idx];
            let error = relative_error(a, numeric);
            coordinates += 1;
            if worst.as_ref().is_none_or(|w| error > w.error) {
                worst = Some(CoordinateError {
                    param: name.clone(),
                    row: idx / value.cols().max(1),
                    col: idx % value.cols().max(1),
                    analytic: a,
                    numeric,
                    error,
                });
            }
        }
    }
    let max_error = worst.as_ref().map_or(0.0, |w| w.error);
    GradCheckReport {
        max_error,
        worst,
        coordinates,
        tol,
        passed: max_error < tol && max_error.is_finite(),
    }
}
