//! Reverse-mode tape. A forward pass records matrix-valued nodes; `backward`
//! replays them in reverse and accumulates gradients into the parameter sets
//! that were registered at the start of the pass. The tape is built per
//! training step and discarded after backward.

use std::collections::HashMap;

use super::matrix::Matrix;
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Named matrices with matching gradient accumulators.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.grads.push(Matrix::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn slot(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.values[self.slot(name)]
    }

    pub fn value(&self, slot: usize) -> &Matrix {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Matrix {
        &mut self.values[slot]
    }

    pub fn grad(&self, slot: usize) -> &Matrix {
        &self.grads[slot]
    }

    pub fn grad_of(&self, name: &str) -> &Matrix {
        &self.grads[self.slot(name)]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    fn accumulate_grad(&mut self, slot: usize, g: &Matrix) {
        self.grads[slot].add_assign(g);
    }

    /// Gradient step: value += scale * grad for every parameter.
    pub fn apply_grads(&mut self, scale: f64) {
        for (v, g) in self.values.iter_mut().zip(&self.grads) {
            v.add_scaled_assign(g, scale);
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

enum Op {
    Leaf,
    Param { set: usize, slot: usize },
    MatMul { a: Var, b: Var },
    /// a * b^T where b is (n x k)
    MatMulTransB { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// a (m x n) + row (1 x n) broadcast over rows
    AddRowBroadcast { a: Var, row: Var },
    ScaleConst { a: Var, c: f64 },
    MulElem { a: Var, b: Var },
    Tanh { a: Var },
    Exp { a: Var },
    LogSoftmaxRows { a: Var },
    /// Square input; row i gets a softmax over columns 0..=i, zeros beyond.
    CausalSoftmaxRows { a: Var },
    LayerNormRows { a: Var, gain: Var, bias: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    /// Per row i: log softmax(logits_i)[targets[i]], output (m x 1).
    PickLogSoftmaxRows { logits: Var, targets: Vec<usize> },
    SumAll { a: Var },
    MeanAll { a: Var },
    LogSumExpAll { a: Var },
    StackScalars { parts: Vec<Var> },
    GatherEntries { a: Var, idx: Vec<(usize, usize)> },
    /// a - s broadcast, s scalar node
    SubScalarBroadcast { a: Var, s: Var },
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar_value()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::scalar(v))
    }

    /// Register a trainable parameter. `set` is the position of its owning
    /// ParameterSet in the slice later passed to `backward`.
    pub fn param(&mut self, set: usize, params: &ParameterSet, name: &str) -> Var {
        let slot = params.slot(name);
        self.push(
            Op::Param { set, slot },
            params.value(slot).clone(),
            true,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b }, v, ng)
    }

    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_transpose_b(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulTransB { a, b }, v, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows(), ma.cols()), (mb.rows(), mb.cols()));
        let data = ma
            .data()
            .iter()
            .zip(mb.data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Matrix::new(ma.rows(), ma.cols(), data).expect("add");
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows(), ma.cols()), (mb.rows(), mb.cols()));
        let data = ma
            .data()
            .iter()
            .zip(mb.data())
            .map(|(x, y)| x - y)
            .collect();
        let v = Matrix::new(ma.rows(), ma.cols(), data).expect("sub");
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a, b }, v, ng)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows(), 1);
        assert_eq!(ma.cols(), mr.cols());
        let n = ma.cols();
        let mut data = ma.data().to_vec();
        for r in 0..ma.rows() {
            for j in 0..n {
                data[r * n + j] += mr.data()[j];
            }
        }
        let v = Matrix::new(ma.rows(), n, data).expect("add_row_broadcast");
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRowBroadcast { a, row }, v, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ma = self.value(a);
        let data = ma.data().iter().map(|x| x * c).collect();
        let v = Matrix::new(ma.rows(), ma.cols(), data).expect("scale");
        let ng = self.needs(a);
        self.push(Op::ScaleConst { a, c }, v, ng)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows(), ma.cols()), (mb.rows(), mb.cols()));
        let data = ma
            .data()
            .iter()
            .zip(mb.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Matrix::new(ma.rows(), ma.cols(), data).expect("mul_elem");
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MulElem { a, b }, v, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let data = ma.data().iter().map(|x| x.tanh()).collect();
        let v = Matrix::new(ma.rows(), ma.cols(), data).expect("tanh");
        let ng = self.needs(a);
        self.push(Op::Tanh { a }, v, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let data = ma.data().iter().map(|x| x.exp()).collect();
        let v = Matrix::new(ma.rows(), ma.cols(), data).expect("exp");
        let ng = self.needs(a);
        self.push(Op::Exp { a }, v, ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let (m, n) = (ma.rows(), ma.cols());
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = ma.row(r);
            let lse = super::log_sum_exp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let v = Matrix::new(m, n, data).expect("log_softmax_rows");
        let ng = self.needs(a);
        self.push(Op::LogSoftmaxRows { a }, v, ng)
    }

    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let (m, n) = (ma.rows(), ma.cols());
        assert_eq!(m, n, "causal softmax expects square scores");
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &ma.row(r)[..=r];
            let lse = super::log_sum_exp(row);
            for (j, x) in row.iter().enumerate() {
                data[r * n + j] = (x - lse).exp();
            }
        }
        let v = Matrix::new(m, n, data).expect("causal_softmax_rows");
        let ng = self.needs(a);
        self.push(Op::CausalSoftmaxRows { a }, v, ng)
    }

    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let (ma, mg, mb) = (self.value(a), self.value(gain), self.value(bias));
        let n = ma.cols();
        assert_eq!((mg.rows(), mg.cols()), (1, n));
        assert_eq!((mb.rows(), mb.cols()), (1, n));
        let mut data = Vec::with_capacity(ma.len());
        for r in 0..ma.rows() {
            let row = ma.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                data.push(mg.data()[j] * (row[j] - mean) * inv + mb.data()[j]);
            }
        }
        let v = Matrix::new(ma.rows(), n, data).expect("layer_norm_rows");
        let ng = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNormRows { a, gain, bias }, v, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ma = self.value(a);
        let n = ma.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(ma.row(i));
        }
        let v = Matrix::new(idx.len(), n, data).expect("gather_rows");
        let ng = self.needs(a);
        self.push(Op::GatherRows { a, idx }, v, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ma = self.value(a);
        let mut data = Vec::with_capacity(ma.rows() * len);
        for r in 0..ma.rows() {
            data.extend_from_slice(&ma.row(r)[start..start + len]);
        }
        let v = Matrix::new(ma.rows(), len, data).expect("slice_cols");
        let ng = self.needs(a);
        self.push(Op::SliceCols { a, start }, v, ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in &parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let v = Matrix::new(rows, total, data).expect("concat_cols");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatCols { parts }, v, ng)
    }

    /// Row-wise log softmax, then pick the target column per row: (m x 1).
    pub fn pick_log_softmax_rows(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let ml = self.value(logits);
        assert_eq!(ml.rows(), targets.len());
        let mut data = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let row = ml.row(r);
            data.push(row[t] - super::log_sum_exp(row));
        }
        let v = Matrix::new(targets.len(), 1, data).expect("pick_log_softmax_rows");
        let ng = self.needs(logits);
        self.push(Op::PickLogSoftmaxRows { logits, targets }, v, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll { a }, Matrix::scalar(s), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let s: f64 = ma.data().iter().sum::<f64>() / ma.len() as f64;
        let ng = self.needs(a);
        self.push(Op::MeanAll { a }, Matrix::scalar(s), ng)
    }

    pub fn log_sum_exp_all(&mut self, a: Var) -> Var {
        let s = super::log_sum_exp(self.value(a).data());
        let ng = self.needs(a);
        self.push(Op::LogSumExpAll { a }, Matrix::scalar(s), ng)
    }

    pub fn stack_scalars(&mut self, parts: Vec<Var>) -> Var {
        let data: Vec<f64> = parts.iter().map(|p| self.scalar(*p)).collect();
        let v = Matrix::new(parts.len(), 1, data).expect("stack_scalars");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::StackScalars { parts }, v, ng)
    }

    pub fn gather_entries(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let ma = self.value(a);
        let data: Vec<f64> = idx.iter().map(|&(r, c)| ma.at(r, c)).collect();
        let v = Matrix::new(idx.len(), 1, data).expect("gather_entries");
        let ng = self.needs(a);
        self.push(Op::GatherEntries { a, idx }, v, ng)
    }

    pub fn sub_scalar_broadcast(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let ma = self.value(a);
        let data = ma.data().iter().map(|x| x - sv).collect();
        let v = Matrix::new(ma.rows(), ma.cols(), data).expect("sub_scalar_broadcast");
        let ng = self.needs(a) || self.needs(s);
        self.push(Op::SubScalarBroadcast { a, s }, v, ng)
    }

    /// Dot product of two same-shape nodes as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.mul_elem(a, b);
        self.sum_all(prod)
    }

    /// Reverse pass from a scalar loss. Gradients of every parameter node are
    /// accumulated into the supplied parameter sets (indexed by the `set`
    /// argument given to `param`). Gradient buffers are not zeroed here.
    pub fn backward(&mut self, loss: Var, sets: &mut [&mut ParameterSet]) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward without recorded forward".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid("backward seed must be a scalar loss"));
        }
        if !lv.scalar_value().is_finite() {
            return Err(Error::NumericDomain("non-finite loss".into()));
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads, sets);
        }
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        sets: &mut [&mut ParameterSet],
    ) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Param { set, slot } => {
                sets[*set].accumulate_grad(*slot, g);
            }
            Op::MatMul { a, b } => {
                // C = A B: dA = G B^T, dB = A^T G
                if self.needs(*a) {
                    let da = g.matmul_transpose_b(self.value(*b));
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = self.value(*a).transpose_a_matmul(g);
                    self.add_grad(grads, *b, db);
                }
            }
            Op::MatMulTransB { a, b } => {
                // C = A B^T: dA = G B, dB = G^T A
                if self.needs(*a) {
                    let da = g.matmul(self.value(*b));
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.transpose_a_matmul(self.value(*a));
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let mut neg = g.clone();
                    neg.data_mut().iter_mut().for_each(|x| *x = -*x);
                    self.add_grad(grads, *b, neg);
                }
            }
            Op::AddRowBroadcast { a, row } => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.clone());
                }
                if self.needs(*row) {
                    let n = g.cols();
                    let mut dr = vec![0.0; n];
                    for r in 0..g.rows() {
                        for j in 0..n {
                            dr[j] += g.at(r, j);
                        }
                    }
                    self.add_grad(grads, *row, Matrix::new(1, n, dr).unwrap());
                }
            }
            Op::ScaleConst { a, c } => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    da.data_mut().iter_mut().for_each(|x| *x *= c);
                    self.add_grad(grads, *a, da);
                }
            }
            Op::MulElem { a, b } => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = g.clone();
                    for (x, y) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Tanh { a } => {
                if self.needs(*a) {
                    let v = &self.nodes[id].value;
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(v.data()) {
                        *x *= 1.0 - y * y;
                    }
                    self.add_grad(grads, *a, da);
                }
            }
            Op::Exp { a } => {
                if self.needs(*a) {
                    let v = &self.nodes[id].value;
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(v.data()) {
                        *x *= y;
                    }
                    self.add_grad(grads, *a, da);
                }
            }
            Op::LogSoftmaxRows { a } => {
                if self.needs(*a) {
                    // y = x - lse(x): dx = g - softmax(x) * rowsum(g)
                    let y = &self.nodes[id].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let gs: f64 = g.row(r).iter().sum();
                        for j in 0..n {
                            da[r * n + j] = g.at(r, j) - y.at(r, j).exp() * gs;
                        }
                    }
                    self.add_grad(grads, *a, Matrix::new(m, n, da).unwrap());
                }
            }
            Op::CausalSoftmaxRows { a } => {
                if self.needs(*a) {
                    let p = &self.nodes[id].value;
                    let (m, n) = (p.rows(), p.cols());
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let mut dot = 0.0;
                        for j in 0..=r {
                            dot += g.at(r, j) * p.at(r, j);
                        }
                        for j in 0..=r {
                            da[r * n + j] = p.at(r, j) * (g.at(r, j) - dot);
                        }
                    }
                    self.add_grad(grads, *a, Matrix::new(m, n, da).unwrap());
                }
            }
            Op::LayerNormRows { a, gain, bias } => {
                let x = self.value(*a);
                let mg = self.value(*gain);
                let (m, n) = (x.rows(), x.cols());
                let nf = n as f64;
                let mut da = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut gg_sum = 0.0; // sum of g*gain
                    let mut gg_xhat = 0.0; // sum of g*gain*xhat
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gg = g.at(r, j) * mg.data()[j];
                        gg_sum += gg;
                        gg_xhat += gg * xhat;
                        dgain[j] += g.at(r, j) * xhat;
                        dbias[j] += g.at(r, j);
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gg = g.at(r, j) * mg.data()[j];
                        da[r * n + j] = inv * (gg - gg_sum / nf - xhat * gg_xhat / nf);
                    }
                }
                if self.needs(*a) {
                    self.add_grad(grads, *a, Matrix::new(m, n, da).unwrap());
                }
                if self.needs(*gain) {
                    self.add_grad(grads, *gain, Matrix::new(1, n, dgain).unwrap());
                }
                if self.needs(*bias) {
                    self.add_grad(grads, *bias, Matrix::new(1, n, dbias).unwrap());
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let ma = self.value(*a);
                    let n = ma.cols();
                    let mut da = Matrix::zeros(ma.rows(), n);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            let v = da.at(i, j) + g.at(r, j);
                            da.set(i, j, v);
                        }
                    }
                    self.add_grad(grads, *a, da);
                }
            }
            Op::SliceCols { a, start } => {
                if self.needs(*a) {
                    let ma = self.value(*a);
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    for r in 0..g.rows() {
                        for j in 0..g.cols() {
                            da.set(r, start + j, g.at(r, j));
                        }
                    }
                    self.add_grad(grads, *a, da);
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            for j in 0..w {
                                dp.set(r, j, g.at(r, offset + j));
                            }
                        }
                        self.add_grad(grads, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::PickLogSoftmaxRows { logits, targets } => {
                if self.needs(*logits) {
                    let ml = self.value(*logits);
                    let (m, n) = (ml.rows(), ml.cols());
                    let mut da = vec![0.0; m * n];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = ml.row(r);
                        let lse = super::log_sum_exp(row);
                        let gr = g.at(r, 0);
                        for j in 0..n {
                            let p = (row[j] - lse).exp();
                            da[r * n + j] = gr * ((j == t) as usize as f64 - p);
                        }
                    }
                    self.add_grad(grads, *logits, Matrix::new(m, n, da).unwrap());
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let ma = self.value(*a);
                    let gs = g.scalar_value();
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    da.fill(gs);
                    self.add_grad(grads, *a, da);
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let ma = self.value(*a);
                    let gs = g.scalar_value() / ma.len() as f64;
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    da.fill(gs);
                    self.add_grad(grads, *a, da);
                }
            }
            Op::LogSumExpAll { a } => {
                if self.needs(*a) {
                    let ma = self.value(*a);
                    let lse = self.nodes[id].value.scalar_value();
                    let gs = g.scalar_value();
                    let data = ma.data().iter().map(|x| gs * (x - lse).exp()).collect();
                    self.add_grad(
                        grads,
                        *a,
                        Matrix::new(ma.rows(), ma.cols(), data).unwrap(),
                    );
                }
            }
            Op::StackScalars { parts } => {
                for (r, p) in parts.iter().enumerate() {
                    if self.needs(*p) {
                        self.add_grad(grads, *p, Matrix::scalar(g.at(r, 0)));
                    }
                }
            }
            Op::GatherEntries { a, idx } => {
                if self.needs(*a) {
                    let ma = self.value(*a);
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        let v = da.at(r, c) + g.at(k, 0);
                        da.set(r, c, v);
                    }
                    self.add_grad(grads, *a, da);
                }
            }
            Op::SubScalarBroadcast { a, s } => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.clone());
                }
                if self.needs(*s) {
                    let ds = -g.data().iter().sum::<f64>();
                    self.add_grad(grads, *s, Matrix::scalar(ds));
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
