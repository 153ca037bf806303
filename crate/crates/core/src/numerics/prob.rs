//! Stable softmax, log-softmax and KL divergence on plain matrices.

use crate::error::{Result, SdaError};
use crate::numerics::Matrix;

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Row-wise log-softmax, `x - max - ln Σ exp(x - max)`.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A validated probability vector: nonnegative entries summing to one within `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRow(Vec<f64>);

impl ProbabilityRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(SdaError::InvalidDistribution(format!(
                "entry {i} is {v}"
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SdaError::InvalidDistribution(format!(
                "entries sum to {total}"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `KL(t ‖ p) = Σ t_j (ln t_j - ln p_j)` with `0 ln 0 = 0`.
///
/// Entries of `p` that are nonzero but below [`PROB_FLOOR`] are floored
/// before the logarithm; an exact zero under positive `t` mass is an error.
pub fn kl_div(t: &ProbabilityRow, p: &ProbabilityRow) -> Result<f64> {
    if t.len() != p.len() {
        return Err(SdaError::Shape(format!(
            "kl_div of rows with lengths {} and {}",
            t.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for (j, (&tj, &pj)) in t.as_slice().iter().zip(p.as_slice()).enumerate() {
        if tj == 0.0 {
            continue;
        }
        if pj == 0.0 {
            return Err(SdaError::KlSupport { index: j });
        }
        total += tj * (tj.max(PROB_FLOOR).ln() - pj.max(PROB_FLOOR).ln());
    }
    Ok(total)
}
