//! The variational polarity classifier q, the CLUB mutual-information
//! upper bound, and its importance-weighted form used as the fairness loss.
//!
//! Negative pairs reuse the positive sample set (including the i = j term),
//! so a q that is constant in h cancels to exactly zero.

use rand::Rng;

use crate::model::HiddenTrace;
use crate::numerics::{LogProbVector, Matrix, ParameterSet, Tape, Var};
use crate::{Error, Result};

/// Width of q's single hidden layer.
pub const Q_HIDDEN_WIDTH: usize = 32;

/// Anything that can score log q(j | h). The trained classifier implements
/// this over hidden-state vectors; tests implement it over discrete worlds
/// with exact table-backed conditionals.
pub trait PolarityScorer<H: ?Sized> {
    fn log_conditional(&self, h: &H, j: usize) -> f64;
}

/// One-hidden-layer classifier from h in R^d to log-probabilities over the
/// K demographic groups: log_softmax(W2 tanh(W1 h + b1) + b2).
#[derive(Debug, Clone)]
pub struct PolarityClassifier {
    pub params: ParameterSet,
    k: usize,
}

impl PolarityClassifier {
    /// Random weights, zero biases.
    pub fn init(d: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || k < 2 {
            return Err(Error::invalid("classifier needs d >= 1 and K >= 2"));
        }
        let mut rng = crate::training::seeded_rng(seed);
        let mut params = ParameterSet::new();
        let mut randn = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    0.2 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            Matrix::new(rows, cols, data).expect("finite init")
        };
        params.insert("w1", randn(Q_HIDDEN_WIDTH, d));
        params.insert("b1", Matrix::zeros(1, Q_HIDDEN_WIDTH));
        params.insert("w2", randn(k, Q_HIDDEN_WIDTH));
        params.insert("b2", Matrix::zeros(1, k));
        Ok(PolarityClassifier { params, k })
    }

    /// All-zero parameters: the output is uniform, ln(1/K), for every input.
    pub fn zeros(d: usize, k: usize) -> Result<Self> {
        let mut q = Self::init(d, k, 0)?;
        for slot in 0..q.params.len() {
            q.params.value_mut(slot).fill(0.0);
        }
        Ok(q)
    }

    pub fn from_params(params: ParameterSet) -> Result<Self> {
        for name in ["w1", "b1", "w2", "b2"] {
            if !params.names().iter().any(|n| n == name) {
                return Err(Error::invalid(format!("classifier parameter '{name}' missing")));
            }
        }
        let k = params.get("w2").rows();
        if k < 2 {
            return Err(Error::invalid("classifier needs K >= 2"));
        }
        Ok(PolarityClassifier { params, k })
    }

    pub fn group_count(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.params.get("w1").cols()
    }

    /// Plain forward pass for one hidden state.
    pub fn log_probs(&self, h: &[f64]) -> Result<LogProbVector> {
        let w1 = self.params.get("w1");
        if h.len() != w1.cols() {
            return Err(Error::invalid(format!(
                "hidden state has {} entries, classifier expects {}",
                h.len(),
                w1.cols()
            )));
        }
        let b1 = self.params.get("b1");
        let w2 = self.params.get("w2");
        let b2 = self.params.get("b2");
        let mid: Vec<f64> = (0..w1.rows())
            .map(|r| {
                let z: f64 = w1.row(r).iter().zip(h).map(|(w, x)| w * x).sum();
                (z + b1.at(0, r)).tanh()
            })
            .collect();
        let scores: Vec<f64> = (0..self.k)
            .map(|r| {
                let z: f64 = w2.row(r).iter().zip(&mid).map(|(w, x)| w * x).sum();
                z + b2.at(0, r)
            })
            .collect();
        crate::numerics::log_softmax(&scores)
    }
}

impl PolarityScorer<[f64]> for PolarityClassifier {
    fn log_conditional(&self, h: &[f64], j: usize) -> f64 {
        self.log_probs(h).expect("dimension-checked input").values()[j]
    }
}

/// log q(j | h) under the classifier.
pub fn q_loglik(q: &PolarityClassifier, h: &[f64], j: usize) -> Result<f64> {
    if j >= q.k {
        return Err(Error::invalid(format!("group index {j} out of range (K={})", q.k)));
    }
    Ok(q.log_probs(h)?.values()[j])
}

/// N triples (polarized label, sampled hidden state, weight), plus the
/// weight vector used for negative-pair mixing.
#[derive(Debug, Clone)]
pub struct WeightedPairBatch {
    pub labels: Vec<usize>,
    pub hiddens: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedPairBatch {
    pub fn new(labels: Vec<usize>, hiddens: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if labels.is_empty() || labels.len() != hiddens.len() || labels.len() != weights.len() {
            return Err(Error::invalid("batch fields must be nonempty and equal length"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("weights must lie in [0,1] and sum to 1"));
        }
        Ok(WeightedPairBatch {
            labels,
            hiddens,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Uniformly pick a position t in [1, T] and return (t, h_t).
pub fn sample_hidden_position<R: Rng>(trace: &HiddenTrace, rng: &mut R) -> (usize, Vec<f64>) {
    let t = rng.gen_range(1..=trace.0.len());
    (t, trace.0[t - 1].clone())
}

/// q's forward pass recorded on a tape. `set` selects whether the
/// parameters are trainable (Some(set index)) or frozen constants.
pub struct QVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl QVars {
    pub fn register(tape: &mut Tape, q: &PolarityClassifier, set: Option<usize>) -> Self {
        let mut reg = |name: &str| match set {
            Some(s) => tape.param(s, &q.params, name),
            None => tape.constant(q.params.get(name).clone()),
        };
        QVars {
            w1: reg("w1"),
            b1: reg("b1"),
            w2: reg("w2"),
            b2: reg("b2"),
        }
    }

    /// Log-probability rows for a stack of hidden states (rows of `hidden`).
    pub fn log_prob_rows(&self, tape: &mut Tape, hidden: Var) -> Var {
        let mid = tape.matmul_transpose_b(hidden, self.w1);
        let mid = tape.add_row_broadcast(mid, self.b1);
        let mid = tape.tanh(mid);
        let scores = tape.matmul_transpose_b(mid, self.w2);
        let scores = tape.add_row_broadcast(scores, self.b2);
        tape.log_softmax_rows(scores)
    }
}

/// Eq. 17's double sum on the tape: sum_i m_i [QL_i(J_i) - sum_j m_j QL_j(J_i)],
/// where `log_rows[i]` is sentence i's 1 x K log-probability row and `m` is
/// the weight column (n x 1). Differentiable through everything handed in.
pub fn weighted_club_var(
    tape: &mut Tape,
    log_rows: &[Var],
    labels: &[usize],
    m: Var,
) -> Result<Var> {
    let n = log_rows.len();
    if n == 0 || labels.len() != n {
        return Err(Error::invalid("mismatched pair batch"));
    }
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let pos = tape.gather_entries(log_rows[i], vec![(0, labels[i])]);
        let col: Vec<Var> = (0..n)
            .map(|j| tape.gather_entries(log_rows[j], vec![(0, labels[i])]))
            .collect();
        let stacked = tape.stack_scalars(col);
        let neg = tape.dot(m, stacked);
        let diff = tape.sub(pos, neg);
        terms.push(diff);
    }
    let diffs = tape.stack_scalars(terms);
    Ok(tape.dot(m, diffs))
}

/// One gradient-ascent step on the weighted log-likelihood
/// sum_i m_i q(J_i | h_i); weights and hidden states are constants here.
/// Returns the objective value before the update.
pub fn fit_q_step(q: &mut PolarityClassifier, batch: &WeightedPairBatch, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let qvars = QVars::register(&mut tape, q, Some(0));
    let mut picks = Vec::with_capacity(batch.len());
    for (h, &j) in batch.hiddens.iter().zip(&batch.labels) {
        if j >= q.k {
            return Err(Error::invalid(format!("group index {j} out of range (K={})", q.k)));
        }
        let hv = tape.constant(Matrix::row_vector(h.clone())?);
        let row = qvars.log_prob_rows(&mut tape, hv);
        picks.push(tape.gather_entries(row, vec![(0, j)]));
    }
    let picked = tape.stack_scalars(picks);
    let m = tape.constant(Matrix::new(batch.len(), 1, batch.weights.clone())?);
    let objective = tape.dot(m, picked);
    let value = tape.scalar(objective);
    if !value.is_finite() {
        return Err(Error::NumericDomain(format!(
            "non-finite q objective {value}"
        )));
    }
    q.params.zero_grads();
    tape.backward(objective, &mut [&mut q.params])?;
    q.params.apply_grads(lr);
    Ok(value)
}

/// Eq. 7's sampled CLUB bound: (1/N) sum_i [q(J_i|h_i) - (1/N) sum_j q(J_i|h_j)].
pub fn club_estimate<H, Q: PolarityScorer<H>>(q: &Q, pairs: &[(usize, H)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair set"));
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for (j_i, h_i) in pairs {
        let pos = q.log_conditional(h_i, *j_i);
        let neg: f64 = pairs.iter().map(|(_, h_j)| q.log_conditional(h_j, *j_i)).sum();
        total += pos - neg / n;
    }
    Ok(total / n)
}

/// Eq. 17 as a plain value (no gradients): the importance-weighted CLUB
/// estimate over one weighted batch.
pub fn weighted_club_estimate(q: &PolarityClassifier, batch: &WeightedPairBatch) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let pos = q_loglik(q, &batch.hiddens[i], batch.labels[i])?;
        let mut neg = 0.0;
        for j in 0..batch.len() {
            neg += batch.weights[j] * q_loglik(q, &batch.hiddens[j], batch.labels[i])?;
        }
        total += batch.weights[i] * (pos - neg);
    }
    Ok(total)
}
