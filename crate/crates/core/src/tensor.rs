//! Dense 2D matrices and a tape-based reverse-mode gradient engine.
//!
//! A `Tape` records every operation applied to its tensors; `backward` walks
//! the record in reverse and accumulates gradients for every node, including
//! leaves that are used multiple times. The op set is exactly what a small
//! transformer over candidate-edge sequences needs; everything is 64-bit so
//! gradients can be checked against central finite differences tightly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities inside the loss are clamped into [EPS, 1 - EPS].
pub const BCE_CLAMP: f64 = 1e-7;

const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// A dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Matrix {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn row_vector(values: &[f64]) -> Matrix {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a 1x1 matrix.
    pub fn scalar(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "not a scalar");
        self.data[0]
    }

    fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(lhs) {
                    *d += a * b;
                }
            }
        }
        out
    }

    fn transposed(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    fn add_into(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    /// Adds a 1xC row to every row of an NxC matrix.
    AddRowBroadcast(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Sigmoid(TensorId),
    ConcatCols(TensorId, TensorId),
    ConcatRows(Vec<TensorId>),
    /// Picks rows by index; duplicates allowed, gradients scatter-add.
    GatherRows(TensorId, Vec<usize>),
    /// Row-wise softmax over the columns where `mask` is true; masked columns
    /// output 0. A fully masked row outputs all zeros.
    SoftmaxRowsMasked(TensorId, Vec<bool>),
    /// Per-row normalization with learned 1xC scale and shift.
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId },
    /// Weighted binary cross-entropy between sigmoid(logits) and labels,
    /// averaged over rows. Logits are Nx1.
    WeightedBce { logits: TensorId, labels: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Records a computation so its gradients can be replayed in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `id`; zero-filled if the node did not influence the loss.
    pub fn get(&self, id: TensorId, tape: &Tape) -> Matrix {
        let value = &tape.nodes[id.0].value;
        self.grads[id.0].clone().unwrap_or_else(|| Matrix::zeros(value.rows, value.cols))
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, id: TensorId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> TensorId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).transposed();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let mut value = self.value(a).clone();
        value.add_into(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let base = self.value(a);
        let bias = self.value(row);
        assert_eq!(bias.rows, 1, "broadcast row must be 1xC");
        assert_eq!(base.cols, bias.cols, "broadcast width mismatch");
        let value = Matrix::from_fn(base.rows, base.cols, |r, c| base.get(r, c) + bias.get(0, c));
        self.push(Op::AddRowBroadcast(a, row), value)
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let base = self.value(a);
        let value = Matrix::from_fn(base.rows, base.cols, |r, c| base.get(r, c) * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let base = self.value(a);
        let value = Matrix::from_fn(base.rows, base.cols, |r, c| base.get(r, c).max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let base = self.value(a);
        let value = Matrix::from_fn(base.rows, base.cols, |r, c| sigmoid(base.get(r, c)));
        self.push(Op::Sigmoid(a), value)
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (left, right) = (self.value(a), self.value(b));
        assert_eq!(left.rows, right.rows, "concat_cols row mismatch");
        let cols = left.cols + right.cols;
        let value = Matrix::from_fn(left.rows, cols, |r, c| {
            if c < left.cols {
                left.get(r, c)
            } else {
                right.get(r, c - left.cols)
            }
        });
        self.push(Op::ConcatCols(a, b), value)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols;
        let rows = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let block = self.value(p);
            assert_eq!(block.cols, cols, "concat_rows width mismatch");
            for r in 0..block.rows {
                for c in 0..cols {
                    value.set(at + r, c, block.get(r, c));
                }
            }
            at += block.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let base = self.value(a);
        assert!(indices.iter().all(|&i| i < base.rows), "gather index out of range");
        let value = Matrix::from_fn(indices.len(), base.cols, |r, c| base.get(indices[r], c));
        self.push(Op::GatherRows(a, indices.to_vec()), value)
    }

    pub fn softmax_rows_masked(&mut self, a: TensorId, mask: &[bool]) -> TensorId {
        let base = self.value(a);
        assert_eq!(mask.len(), base.cols, "mask width mismatch");
        let mut value = Matrix::zeros(base.rows, base.cols);
        for r in 0..base.rows {
            let mut max = f64::NEG_INFINITY;
            for (c, keep) in mask.iter().enumerate() {
                if *keep {
                    max = max.max(base.get(r, c));
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (c, keep) in mask.iter().enumerate() {
                if *keep {
                    let e = (base.get(r, c) - max).exp();
                    value.set(r, c, e);
                    sum += e;
                }
            }
            for (c, keep) in mask.iter().enumerate() {
                if *keep {
                    value.set(r, c, value.get(r, c) / sum);
                }
            }
        }
        self.push(Op::SoftmaxRowsMasked(a, mask.to_vec()), value)
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (base, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(g.rows, 1, "gamma must be 1xC");
        assert_eq!(b.rows, 1, "beta must be 1xC");
        assert_eq!(g.cols, base.cols, "gamma width mismatch");
        assert_eq!(b.cols, base.cols, "beta width mismatch");
        let mut value = Matrix::zeros(base.rows, base.cols);
        for r in 0..base.rows {
            let (mean, inv_std) = row_moments(base.row(r));
            for c in 0..base.cols {
                let xhat = (base.get(r, c) - mean) * inv_std;
                value.set(r, c, g.get(0, c) * xhat + b.get(0, c));
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta }, value)
    }

    /// Mean over rows of weight * BCE(clamp(sigmoid(logit)), label).
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: TensorId,
        labels: &[f64],
        weights: &[f64],
    ) -> Result<TensorId> {
        let base = self.value(logits);
        if base.cols != 1 || base.rows != labels.len() || base.rows != weights.len() {
            return Err(Error::Model(format!(
                "loss shape mismatch: {} logits, {} labels, {} weights",
                base.rows,
                labels.len(),
                weights.len()
            )));
        }
        if base.rows == 0 {
            return Err(Error::Model("loss over zero edges".into()));
        }
        let mut total = 0.0;
        for r in 0..base.rows {
            let p = sigmoid(base.get(r, 0)).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = labels[r];
            total -= weights[r] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        let value = Matrix::row_vector(&[total / base.rows as f64]);
        Ok(self.push(
            Op::WeightedBce { logits, labels: labels.to_vec(), weights: weights.to_vec() },
            value,
        ))
    }

    /// Gradients of the scalar at `loss` with respect to every node.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        let seed = &self.nodes[loss.0].value;
        assert_eq!((seed.rows, seed.cols), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::row_vector(&[1.0]));

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            self.accumulate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn push(&mut self, op: Op, value: Matrix) -> TensorId {
        self.nodes.push(Node { op, value });
        TensorId(self.nodes.len() - 1)
    }

    fn accumulate(&self, id: usize, grad: &Matrix, grads: &mut [Option<Matrix>]) {
        let add = |slot: &mut Option<Matrix>, delta: Matrix| match slot {
            Some(m) => m.add_into(&delta),
            None => *slot = Some(delta),
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bt = self.value(*b).transposed();
                add(&mut grads[a.0], grad.matmul(&bt));
                let at = self.value(*a).transposed();
                add(&mut grads[b.0], at.matmul(grad));
            }
            Op::Transpose(a) => add(&mut grads[a.0], grad.transposed()),
            Op::Add(a, b) => {
                add(&mut grads[a.0], grad.clone());
                add(&mut grads[b.0], grad.clone());
            }
            Op::AddRowBroadcast(a, row) => {
                add(&mut grads[a.0], grad.clone());
                let mut summed = Matrix::zeros(1, grad.cols);
                for r in 0..grad.rows {
                    for c in 0..grad.cols {
                        summed.set(0, c, summed.get(0, c) + grad.get(r, c));
                    }
                }
                add(&mut grads[row.0], summed);
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                add(&mut grads[a.0], Matrix::from_fn(grad.rows, grad.cols, |r, c| grad.get(r, c) * f));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                add(
                    &mut grads[a.0],
                    Matrix::from_fn(grad.rows, grad.cols, |r, c| {
                        if x.get(r, c) > 0.0 {
                            grad.get(r, c)
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                add(
                    &mut grads[a.0],
                    Matrix::from_fn(grad.rows, grad.cols, |r, c| {
                        let s = y.get(r, c);
                        grad.get(r, c) * s * (1.0 - s)
                    }),
                );
            }
            Op::ConcatCols(a, b) => {
                let left_cols = self.value(*a).cols;
                add(&mut grads[a.0], Matrix::from_fn(grad.rows, left_cols, |r, c| grad.get(r, c)));
                add(
                    &mut grads[b.0],
                    Matrix::from_fn(grad.rows, grad.cols - left_cols, |r, c| grad.get(r, c + left_cols)),
                );
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    add(&mut grads[p.0], Matrix::from_fn(rows, grad.cols, |r, c| grad.get(at + r, c)));
                    at += rows;
                }
            }
            Op::GatherRows(a, indices) => {
                let base = self.value(*a);
                let mut scattered = Matrix::zeros(base.rows, base.cols);
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..grad.cols {
                        scattered.set(src, c, scattered.get(src, c) + grad.get(r, c));
                    }
                }
                add(&mut grads[a.0], scattered);
            }
            Op::SoftmaxRowsMasked(a, mask) => {
                let s = &self.nodes[id].value;
                let mut out = Matrix::zeros(grad.rows, grad.cols);
                for r in 0..grad.rows {
                    let mut dot = 0.0;
                    for (c, keep) in mask.iter().enumerate() {
                        if *keep {
                            dot += grad.get(r, c) * s.get(r, c);
                        }
                    }
                    for (c, keep) in mask.iter().enumerate() {
                        if *keep {
                            out.set(r, c, s.get(r, c) * (grad.get(r, c) - dot));
                        }
                    }
                }
                add(&mut grads[a.0], out);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let base = self.value(*x);
                let g = self.value(*gamma);
                let n = base.cols as f64;
                let mut dx = Matrix::zeros(base.rows, base.cols);
                let mut dgamma = Matrix::zeros(1, base.cols);
                let mut dbeta = Matrix::zeros(1, base.cols);
                for r in 0..base.rows {
                    let (mean, inv_std) = row_moments(base.row(r));
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for c in 0..base.cols {
                        let xhat = (base.get(r, c) - mean) * inv_std;
                        let dy = grad.get(r, c) * g.get(0, c);
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dgamma.set(0, c, dgamma.get(0, c) + grad.get(r, c) * xhat);
                        dbeta.set(0, c, dbeta.get(0, c) + grad.get(r, c));
                    }
                    for c in 0..base.cols {
                        let xhat = (base.get(r, c) - mean) * inv_std;
                        let dy = grad.get(r, c) * g.get(0, c);
                        dx.set(r, c, inv_std * (dy - sum_dy / n - xhat * sum_dy_xhat / n));
                    }
                }
                add(&mut grads[x.0], dx);
                add(&mut grads[gamma.0], dgamma);
                add(&mut grads[beta.0], dbeta);
            }
            Op::WeightedBce { logits, labels, weights } => {
                let z = self.value(*logits);
                let n = z.rows as f64;
                let upstream = grad.scalar();
                let mut dz = Matrix::zeros(z.rows, 1);
                for r in 0..z.rows {
                    let p = sigmoid(z.get(r, 0));
                    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                        continue;
                    }
                    dz.set(r, 0, upstream * weights[r] * (p - labels[r]) / n);
                }
                add(&mut grads[logits.0], dz);
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + LAYER_NORM_EPS).powf(-0.5))
}
