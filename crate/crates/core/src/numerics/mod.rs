//! Dense matrices, stable probability primitives, a reverse-mode tape and a
//! finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod prob;
mod tape;

pub use gradcheck::{grad_check, relative_error, CoordinateError, GradCheckReport, ParamSet};
pub use matrix::Matrix;
pub use prob::{
    kl_div, log_softmax_rows, log_sum_exp, softmax_in_place, softmax_rows, ProbabilityRow,
    PROB_FLOOR,
};
pub use tape::{Gradients, Tape, Var};


/// Euclidean norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; `None` when either norm is below `1e-12`.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
