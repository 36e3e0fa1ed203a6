//! Differentiable computation substrate: dense row-major matrices, a
//! reverse-mode tape, softmax/KL primitives, and finite-difference gradient
//! verification. All math is at 64-bit precision so central differences are
//! a meaningful oracle.

mod grad_check;
mod matrix;
mod tape;

pub use grad_check::check_gradients;
pub use matrix::Matrix;
pub use tape::{ParameterSet, Tape, Var};

use crate::{Error, Result};

/// Natural-log probabilities; the exponentials sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector(Vec<f64>);

impl LogProbVector {
    /// Wrap an already-normalized log-probability vector.
    /// Checks log-sum-exp == 0 within 1e-9.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("log-prob vector must be nonempty"));
        }
        let lse = log_sum_exp(&values);
        if lse.abs() > 1e-9 {
            return Err(Error::NumericDomain(format!(
                "log-prob vector not normalized: log-sum-exp = {lse:e}"
            )));
        }
        Ok(LogProbVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Log-sum-exp with max subtraction. Empty input yields -inf.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log of the softmax of `scores`, computed with max subtraction.
pub fn log_softmax(scores: &[f64]) -> Result<LogProbVector> {
    if scores.is_empty() {
        return Err(Error::invalid("log_softmax: empty input"));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "log_softmax: non-finite input {bad}"
        )));
    }
    let lse = log_sum_exp(scores);
    Ok(LogProbVector(scores.iter().map(|s| s - lse).collect()))
}

/// KL(p || q) = sum exp(p_i) (p_i - q_i), for log-prob vectors of equal length.
pub fn kl_divergence(p: &LogProbVector, q: &LogProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "kl_divergence: length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let kl = p
        .values()
        .iter()
        .zip(q.values())
        .map(|(&pi, &qi)| pi.exp() * (pi - qi))
        .sum();
    Ok(kl)
}
