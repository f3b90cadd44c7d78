//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! Nodes are stored in creation order, so the tape is always topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. Nodes that do not
//! depend on any leaf with `requires_grad` are skipped during the sweep.
//!
//! Matrices are `[rows, cols]`; biases and layer-norm parameters are 1-D
//! `[cols]`; scalars are `[1]`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Swish,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Swish => "swish",
            Activation::Tanh => "tanh",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Swish => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "swish" => Ok(Activation::Swish),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidConfig(format!(
                "unknown non-linearity '{other}', expected relu, gelu, swish or tanh"
            ))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Primitive kinds, used in tape records and error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Scale,
    Activation(Activation),
    SoftmaxRows,
    LayerNorm,
    EmbeddingLookup,
    PoolFirst,
    Transpose,
    SliceCols,
    ConcatCols,
    Sum,
    CrossEntropy,
    SquaredError,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Leaf => f.write_str("leaf"),
            Primitive::MatMul => f.write_str("matmul"),
            Primitive::Add => f.write_str("add"),
            Primitive::AddBias => f.write_str("add_bias"),
            Primitive::Scale => f.write_str("scale"),
            Primitive::Activation(a) => write!(f, "activation({a})"),
            Primitive::SoftmaxRows => f.write_str("softmax_rows"),
            Primitive::LayerNorm => f.write_str("layer_norm"),
            Primitive::EmbeddingLookup => f.write_str("embedding_lookup"),
            Primitive::PoolFirst => f.write_str("pool_first"),
            Primitive::Transpose => f.write_str("transpose"),
            Primitive::SliceCols => f.write_str("slice_cols"),
            Primitive::ConcatCols => f.write_str("concat_cols"),
            Primitive::Sum => f.write_str("sum"),
            Primitive::CrossEntropy => f.write_str("cross_entropy"),
            Primitive::SquaredError => f.write_str("squared_error"),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Activation(Var, Activation),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    PoolFirst(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    SquaredError { pred: Var, target: f64 },
}

impl Op {
    fn kind(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::AddBias(..) => Primitive::AddBias,
            Op::Scale(..) => Primitive::Scale,
            Op::Activation(_, a) => Primitive::Activation(*a),
            Op::SoftmaxRows(_) => Primitive::SoftmaxRows,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Embedding { .. } => Primitive::EmbeddingLookup,
            Op::PoolFirst(_) => Primitive::PoolFirst,
            Op::Transpose(_) => Primitive::Transpose,
            Op::SliceCols { .. } => Primitive::SliceCols,
            Op::ConcatCols(_) => Primitive::ConcatCols,
            Op::Sum(_) => Primitive::Sum,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
            Op::SquaredError { .. } => Primitive::SquaredError,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Activation(x, _)
            | Op::SoftmaxRows(x)
            | Op::PoolFirst(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SquaredError { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A record of one primitive application, as exposed by [`Tape::records`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: Primitive,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Append-only record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn matrix_dims(op: Primitive, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidShape(format!("{op} expects a matrix, got {other:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records for every non-leaf application that participates in differentiation.
    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && !matches!(n.op, Op::Leaf))
            .map(|(i, n)| Record { kind: n.op.kind(), inputs: n.op.inputs(), output: Var(i) })
            .collect()
    }

    /// Every node produced by the given primitive, in creation order.
    pub fn outputs_of(&self, kind: Primitive) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].op.kind() == kind).map(Var).collect()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let kind = op.kind();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(kind));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(Primitive::MatMul, ta)?;
        let (k2, n) = matrix_dims(Primitive::MatMul, tb)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: Primitive::MatMul,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: Primitive::Add,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Add(a, b), shape, data)
    }

    /// Add a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = matrix_dims(Primitive::AddBias, tx)?;
        if tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: Primitive::AddBias,
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = tx.data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c)).collect();
        let shape = tx.shape().to_vec();
        self.push(Op::AddBias(x, bias), shape, data)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let shape = tx.shape().to_vec();
        self.push(Op::Scale(x, factor), shape, data)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| act.apply(v)).collect();
        let shape = tx.shape().to_vec();
        self.push(Op::Activation(x, act), shape, data)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = matrix_dims(Primitive::SoftmaxRows, tx)?;
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        let shape = tx.shape().to_vec();
        self.push(Op::SoftmaxRows(x), shape, data)
    }

    /// Row-wise layer normalization. Rows whose variance is below `epsilon`
    /// normalize to zero, so the output is `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm epsilon must be positive, got {epsilon}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, n) = matrix_dims(Primitive::LayerNorm, tx)?;
        for t in [tg, tb] {
            if t.shape() != [n] {
                return Err(Error::ShapeMismatch {
                    op: Primitive::LayerNorm,
                    left: tx.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.numel() / n);
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var < epsilon {
                inv_std.push(0.0);
                xhat.extend(std::iter::repeat_n(0.0, n));
            } else {
                let s = 1.0 / (var + epsilon).sqrt();
                inv_std.push(s);
                xhat.extend(row.iter().map(|v| (v - mean) * s));
            }
        }
        let (g, b) = (tg.data(), tb.data());
        let data = xhat
            .chunks(n)
            .flat_map(|row| row.iter().zip(g.iter().zip(b)).map(|(h, (gv, bv))| h * gv + bv))
            .collect();
        let shape = tx.shape().to_vec();
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, shape, data)
    }

    /// Gather rows of a `[vocab, h]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, h) = matrix_dims(Primitive::EmbeddingLookup, tt)?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding_lookup needs at least one id".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab_size: vocab });
            }
            data.extend_from_slice(tt.row(id));
        }
        self.push(Op::Embedding { table, ids: ids.to_vec() }, vec![ids.len(), h], data)
    }

    /// First row of a matrix, as a `[1, n]` matrix.
    pub fn pool_first(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = matrix_dims(Primitive::PoolFirst, tx)?;
        let data = tx.row(0).to_vec();
        self.push(Op::PoolFirst(x), vec![1, n], data)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims(Primitive::Transpose, tx)?;
        let data = transpose_raw(tx.data(), m, n);
        self.push(Op::Transpose(x), vec![n, m], data)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims(Primitive::SliceCols, tx)?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of range for {n} columns",
                start + len
            )));
        }
        let data = (0..m).flat_map(|i| tx.row(i)[start..start + len].iter().copied()).collect();
        self.push(Op::SliceCols { x, start }, vec![m, len], data)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols needs at least one input".into()))?;
        let (m, _) = matrix_dims(Primitive::ConcatCols, self.value(*first))?;
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            let (r, c) = matrix_dims(Primitive::ConcatCols, t)?;
            if r != m {
                return Err(Error::ShapeMismatch {
                    op: Primitive::ConcatCols,
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), vec![m, total], data)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), vec![1], vec![total])
    }

    /// Softmax cross-entropy of a single row of logits against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let tl = self.value(logits);
        let classes = tl.numel();
        if tl.dims2().map(|(r, _)| r) != Some(1) {
            return Err(Error::InvalidShape(format!("cross_entropy expects one row, got {:?}", tl.shape())));
        }
        if target >= classes {
            return Err(Error::InvalidArgument(format!("target class {target} >= {classes} classes")));
        }
        let row = tl.data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        let probs = row.iter().map(|v| (v - log_z).exp()).collect();
        let loss = log_z - row[target];
        self.push(Op::CrossEntropy { logits, target, probs }, vec![1], vec![loss])
    }

    pub fn squared_error(&mut self, pred: Var, target: f64) -> Result<Var> {
        let tp = self.value(pred);
        if !tp.is_scalar() {
            return Err(Error::NotScalar(tp.shape().to_vec()));
        }
        let d = tp.item() - target;
        self.push(Op::SquaredError { pred, target }, vec![1], vec![d * d])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, contribution: &dyn Fn() -> Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                let c = contribution();
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, d)| *e += d),
                    slot @ None => *slot = Some(c),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.by_leaf.insert(Var(i), t);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    acc(*a, &|| matmul_raw(&g, &transpose_raw(tb.data(), k, n), m, n, k));
                    acc(*b, &|| matmul_raw(&transpose_raw(ta.data(), m, k), &g, k, m, n));
                }
                Op::Add(a, b) => {
                    acc(*a, &|| g.clone());
                    acc(*b, &|| g.clone());
                }
                Op::AddBias(x, bias) => {
                    let n = self.value(*bias).numel();
                    acc(*x, &|| g.clone());
                    acc(*bias, &|| {
                        let mut col = vec![0.0; n];
                        for row in g.chunks(n) {
                            col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
                        }
                        col
                    });
                }
                Op::Scale(x, factor) => acc(*x, &|| g.iter().map(|v| v * factor).collect()),
                Op::Activation(x, act) => {
                    let tx = self.value(*x);
                    acc(*x, &|| tx.data().iter().zip(&g).map(|(&xv, gv)| act.derivative(xv) * gv).collect());
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let n = y.shape()[1];
                    acc(*x, &|| {
                        let mut dx = Vec::with_capacity(g.len());
                        for (yr, gr) in y.data().chunks(n).zip(g.chunks(n)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                        }
                        dx
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma).data();
                    let n = gam.len();
                    acc(*x, &|| {
                        let mut dx = Vec::with_capacity(g.len());
                        for ((gr, hr), &s) in g.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                            if s == 0.0 {
                                dx.extend(std::iter::repeat_n(0.0, n));
                                continue;
                            }
                            let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / n as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            dx.extend(dh.iter().zip(hr).map(|(d, h)| s * (d - mean_dh - h * mean_dh_h)));
                        }
                        dx
                    });
                    acc(*gamma, &|| {
                        let mut dg = vec![0.0; n];
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        dg
                    });
                    acc(*beta, &|| {
                        let mut db = vec![0.0; n];
                        for gr in g.chunks(n) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                        db
                    });
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let h = tt.shape()[1];
                    acc(*table, &|| {
                        let mut dt = vec![0.0; tt.numel()];
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut dt[id * h..(id + 1) * h];
                            dst.iter_mut().zip(&g[r * h..(r + 1) * h]).for_each(|(d, v)| *d += v);
                        }
                        dt
                    });
                }
                Op::PoolFirst(x) => {
                    let numel = self.value(*x).numel();
                    acc(*x, &|| {
                        let mut dx = vec![0.0; numel];
                        dx[..g.len()].copy_from_slice(&g);
                        dx
                    });
                }
                Op::Transpose(x) => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    acc(*x, &|| transpose_raw(&g, m, n));
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (m, n) = (tx.shape()[0], tx.shape()[1]);
                    let len = node.value.shape()[1];
                    acc(*x, &|| {
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                        }
                        dx
                    });
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).shape()[1];
                        let off = offset;
                        acc(*p, &|| (0..m).flat_map(|i| g[i * total + off..i * total + off + c].to_vec()).collect());
                        offset += c;
                    }
                }
                Op::Sum(x) => {
                    let numel = self.value(*x).numel();
                    acc(*x, &|| vec![g[0]; numel]);
                }
                Op::CrossEntropy { logits, target, probs } => {
                    acc(*logits, &|| {
                        let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                        d[*target] -= g[0];
                        d
                    });
                }
                Op::SquaredError { pred, target } => {
                    let p = self.value(*pred).item();
                    acc(*pred, &|| vec![2.0 * (p - target) * g[0]]);
                }
            }
        }
        Ok(out)
    }
}

/// Compare autodiff against central finite differences for a scalar function of `x`.
///
/// Returns the maximum over coordinates of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be in (0, 1e-2], got {step}")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut tape, xv)?;
    let base = tape.value(loss).clone();
    if !base.is_scalar() {
        return Err(Error::NotScalar(base.shape().to_vec()));
    }
    let analytic = match tape.backward(loss) {
        Ok(grads) => grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())),
        Err(Error::DetachedLoss) => Tensor::zeros(x.shape()),
        Err(e) => return Err(e),
    };
    if eval(x)?.to_bits() != base.item().to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let ad = analytic.data()[i];
        let denom = 1f64.max(ad.abs()).max(numeric.abs());
        worst = worst.max((ad - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[4.2, 4.2, 4.2]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(t(&[3], &[0.7, 0.7, 0.7]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_epsilon() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn matmul_by_zeros_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(t(&[3, 4], &(0..12).map(|v| v as f64 - 5.5).collect::<Vec<_>>()));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[f64::MAX]));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(Primitive::Scale)));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn gelu_gradient_at_zero_is_one_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]).with_requires_grad(true));
        let y = tape.activation(x, Activation::Gelu).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5]);

        let h = 1e-5;
        let fd = (Activation::Gelu.apply(h) - Activation::Gelu.apply(-h)) / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gradient_of_weight_times_ones_has_unit_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3]));
        let w = tape.leaf(t(&[3, 2], &[0.1, -0.4, 2.0, 0.3, 0.0, 1.1]).with_requires_grad(true));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[1, 2]).with_requires_grad(true));
        let b = tape.constant(Tensor::ones(&[1, 2]));
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::ones(&[2]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::DetachedLoss)));
    }

    #[test]
    fn records_are_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]).with_requires_grad(true));
        let y = tape.activation(x, Activation::Tanh).unwrap();
        let z = tape.matmul(y, x).unwrap();
        tape.sum(z).unwrap();
        for r in tape.records() {
            assert!(r.inputs.iter().all(|i| i < &r.output));
        }
        assert_eq!(tape.records().len(), 3);
    }

    #[test]
    fn finite_difference_of_sum_of_squares() {
        // x xᵀ for a single row is the sum of squares
        let x = t(&[1, 6], &[0.3, -1.2, 2.5, 0.0, 4.0, -0.7]);
        let err = finite_difference_check(
            |tape, v| {
                let vt = tape.transpose(v)?;
                let sq = tape.matmul(v, vt)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn finite_difference_of_constant_is_zero() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let err = finite_difference_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_difference_rejects_bad_step_and_nondeterminism() {
        let x = t(&[1], &[1.0]);
        assert!(finite_difference_check(|tape, v| tape.sum(v), &x, 0.1).is_err());
        let counter = std::cell::Cell::new(0.0);
        let res = finite_difference_check(
            |tape, v| {
                counter.set(counter.get() + 1.0);
                let s = tape.sum(v)?;
                tape.scale(s, counter.get())
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }
}
