//! Tape-style reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is append-only: every operation pushes a new node whose
//! parents were created earlier, so creation order is a topological order
//! and `backward` is a single reverse sweep.

use std::rc::Rc;

use crate::error::{HmilError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Hadamard,
    Scale,
    Shift,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    ClampMin,
    Transpose,
    SoftmaxRows,
    LogSoftmaxRows,
    L2NormalizeRows,
    Sum,
    RowSum,
    Reshape,
    ConcatRows,
    Pick,
}

impl std::str::FromStr for OpKind {
    type Err = HmilError;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.to_ascii_lowercase().as_str() {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "add_row" => OpKind::AddRow,
            "hadamard" => OpKind::Hadamard,
            "scale" => OpKind::Scale,
            "shift" => OpKind::Shift,
            "tanh" => OpKind::Tanh,
            "sigmoid" => OpKind::Sigmoid,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "clamp_min" => OpKind::ClampMin,
            "transpose" => OpKind::Transpose,
            "softmax_rows" => OpKind::SoftmaxRows,
            "log_softmax_rows" => OpKind::LogSoftmaxRows,
            "l2_normalize_rows" => OpKind::L2NormalizeRows,
            "sum" => OpKind::Sum,
            "row_sum" => OpKind::RowSum,
            "reshape" => OpKind::Reshape,
            "concat_rows" => OpKind::ConcatRows,
            "pick" => OpKind::Pick,
            other => return Err(HmilError::Config(format!("unknown op kind `{other}`"))),
        };
        Ok(kind)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId, Option<Rc<Vec<bool>>>),
    L2NormalizeRows(NodeId, Vec<f64>),
    Sum(NodeId),
    RowSum(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    Pick(NodeId, usize, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Transpose(..) => OpKind::Transpose,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::L2NormalizeRows(..) => OpKind::L2NormalizeRows,
            Op::Sum(..) => OpKind::Sum,
            Op::RowSum(..) => OpKind::RowSum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Pick(..) => OpKind::Pick,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a, _)
            | Op::L2NormalizeRows(a, _)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::Reshape(a)
            | Op::Pick(a, _, _) => vec![*a],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(NodeId, Matrix)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.entries.iter().find(|(k, _)| *k == id).map(|(_, m)| m)
    }

    /// Gradients in the order the parameters were requested.
    pub fn into_matrices(self) -> Vec<Matrix> {
        self.entries.into_iter().map(|(_, m)| m).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Factor applied to the backward rule of a faulted op kind.
const FAULT_FACTOR: f64 = 1.5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Corrupts the backward rule of every node of `kind`. Test hook for
    /// checking that gradient verification catches broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(HmilError::Numeric(format!(
                "{:?} produced a non-finite value",
                op.kind()
            )));
        }
        let requires_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(HmilError::Shape {
                op: "add_row",
                lhs: x.shape(),
                rhs: r.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        self.push(value, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let value = self.value(a).map(|x| x + offset);
        self.push(value, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
            return Err(HmilError::Domain {
                op: "log",
                detail: format!("nonpositive input {bad}"),
            });
        }
        let value = x.map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// `max(x, floor)` elementwise; gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Softmax along each row, with max-subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = log_softmax_masked(self.value(a), None)?;
        self.push(value, Op::LogSoftmaxRows(a, None))
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    /// Masked-out entries are 0 in the output and receive no gradient.
    pub fn log_softmax_rows_masked(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(HmilError::Shape {
                op: "log_softmax_rows_masked",
                lhs: x.shape(),
                rhs: (mask.len(), 1),
            });
        }
        let value = log_softmax_masked(x, Some(&mask))?;
        self.push(value, Op::LogSoftmaxRows(a, Some(Rc::new(mask))))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(HmilError::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.push(value, Op::L2NormalizeRows(a, norms))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `m x n` to `m x 1` row sums.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let sums = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let value = Matrix::new(x.rows(), 1, sums)?;
        self.push(value, Op::RowSum(a))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(HmilError::Shape {
                op: "reshape",
                lhs: x.shape(),
                rhs: (rows, cols),
            });
        }
        let value = Matrix::new(rows, cols, x.data().to_vec())?;
        self.push(value, Op::Reshape(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| HmilError::Graph("concat_rows needs at least one input".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            if m.cols() != cols {
                return Err(HmilError::Shape {
                    op: "concat_rows",
                    lhs: self.value(*first).shape(),
                    rhs: m.shape(),
                });
            }
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let value = Matrix::new(rows, cols, data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects entry `(r, c)` as a 1x1 node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let x = self.value(a);
        if r >= x.rows() || c >= x.cols() {
            return Err(HmilError::Shape {
                op: "pick",
                lhs: x.shape(),
                rhs: (r, c),
            });
        }
        let value = Matrix::scalar(x.get(r, c));
        self.push(value, Op::Pick(a, r, c))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for `params`
    /// in request order.
    pub fn backward(&self, loss: NodeId, params: &[NodeId]) -> Result<Gradients> {
        self.backward_impl(loss, params, false)
    }

    /// As [`Graph::backward`], but parameters the loss does not depend on
    /// get a zero gradient instead of an error.
    pub fn backward_allow_unused(&self, loss: NodeId, params: &[NodeId]) -> Result<Gradients> {
        self.backward_impl(loss, params, true)
    }

    fn backward_impl(&self, loss: NodeId, params: &[NodeId], allow_unused: bool) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(HmilError::Graph(format!(
                "loss must be 1x1, got {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &upstream)?;
            let scale = if self.fault == Some(node.op.kind()) {
                FAULT_FACTOR
            } else {
                1.0
            };
            for (parent, mut g) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    g = g.map(|v| v * scale);
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }

        let mut entries = Vec::with_capacity(params.len());
        for &p in params {
            let found = grads
                .get(p.0)
                .and_then(|g| g.clone())
                .filter(|_| self.nodes[p.0].requires_grad);
            let g = match found {
                Some(g) => g,
                None if allow_unused => {
                    let (r, c) = self.value(p).shape();
                    Matrix::zeros(r, c)
                }
                None => {
                    return Err(HmilError::Graph(format!(
                        "parameter node {} is not reachable from the loss",
                        p.0
                    )))
                }
            };
            entries.push((p, g));
        }
        Ok(Gradients { entries })
    }

    fn local_grads(&self, node: &Node, dy: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut v = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    v.push((*a, dy.matmul(&bv.transpose())?));
                }
                if self.nodes[b.0].requires_grad {
                    v.push((*b, av.transpose().matmul(dy)?));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::AddRow(a, row) => {
                let mut dr = Matrix::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for (acc, g) in dr.data_mut().iter_mut().zip(dy.row(r)) {
                        *acc += g;
                    }
                }
                vec![(*a, dy.clone()), (*row, dr)]
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, dy.zip_map(bv, "hadamard", |g, x| g * x)?),
                    (*b, dy.zip_map(av, "hadamard", |g, x| g * x)?),
                ]
            }
            Op::Scale(a, f) => vec![(*a, dy.map(|g| g * f))],
            Op::Shift(a) => vec![(*a, dy.clone())],
            Op::Tanh(a) => vec![(*a, dy.zip_map(y, "tanh", |g, t| g * (1.0 - t * t))?)],
            Op::Sigmoid(a) => vec![(*a, dy.zip_map(y, "sigmoid", |g, s| g * s * (1.0 - s))?)],
            Op::Exp(a) => vec![(*a, dy.zip_map(y, "exp", |g, e| g * e)?)],
            Op::Log(a) => vec![(*a, dy.zip_map(self.value(*a), "log", |g, x| g / x)?)],
            Op::ClampMin(a, floor) => {
                let x = self.value(*a);
                vec![(*a, dy.zip_map(x, "clamp_min", |g, v| if v > *floor { g } else { 0.0 })?)]
            }
            Op::Transpose(a) => vec![(*a, dy.transpose())],
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for (d, (p, g)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = p * (g - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmaxRows(a, mask) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                let cols = y.cols();
                let keep = |r: usize, c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
                for r in 0..y.rows() {
                    let total: f64 = (0..cols).filter(|&c| keep(r, c)).map(|c| dy.get(r, c)).sum();
                    for c in 0..cols {
                        if keep(r, c) {
                            dx.set(r, c, dy.get(r, c) - y.get(r, c).exp() * total);
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (r, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(u, g)| u * g).sum();
                    for (d, (u, g)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = (g - u * dot) / norm;
                    }
                }
                vec![(*a, dx)]
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                vec![(*a, Matrix::filled(r, c, dy.get(0, 0)))]
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i).fill(dy.get(i, 0));
                }
                vec![(*a, dx)]
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                vec![(*a, Matrix::new(r, c, dy.data().to_vec())?)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = self.value(*p).shape();
                    let slice = dy.data()[offset * c..(offset + r) * c].to_vec();
                    v.push((*p, Matrix::new(r, c, slice)?));
                    offset += r;
                }
                v
            }
            Op::Pick(a, r, c) => {
                let (rows, cols) = self.value(*a).shape();
                let mut dx = Matrix::zeros(rows, cols);
                dx.set(*r, *c, dy.get(0, 0));
                vec![(*a, dx)]
            }
        };
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_masked(x: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    let cols = x.cols();
    let keep = |r: usize, c: usize| mask.is_none_or(|m| m[r * cols + c]);
    let mut out = Matrix::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let max = (0..cols)
            .filter(|&c| keep(r, c))
            .map(|c| x.get(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(HmilError::Degenerate {
                op: "log_softmax_rows",
                detail: format!("row {r} has no unmasked entries"),
            });
        }
        let lse = max
            + (0..cols)
                .filter(|&c| keep(r, c))
                .map(|c| (x.get(r, c) - max).exp())
                .sum::<f64>()
                .ln();
        for c in 0..cols {
            if keep(r, c) {
                out.set(r, c, x.get(r, c) - lse);
            }
        }
    }
    Ok(out)
}
