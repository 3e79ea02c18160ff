//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is always a valid
//! topological order and the backward pass is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Affine,
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    Log,
    Exp,
    Mean,
    Sum,
    Concat,
    Slice,
    Transpose,
    EmbeddingLookup,
    LayerNorm,
    Relu,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Affine => "affine",
            OpKind::SoftmaxLastDim => "softmax-last-dim",
            OpKind::LogSoftmaxLastDim => "log-softmax-last-dim",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::EmbeddingLookup => "embedding-lookup",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Relu => "relu",
            OpKind::CrossEntropy => "cross-entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[1, c]` or `[c]` against `[r, c]`.
    Row,
    /// `[r, 1]` against `[r, c]`.
    Col,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Affine(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Transpose(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Relu(NodeId),
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the parameters that appeared in
/// the graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Shape {
                            op: "gradient-accumulate",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, kind: OpKind) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false, OpKind::Constant)
            .expect("constant tensors must be finite")
    }

    /// Records a trainable leaf. Each parameter appears at most once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self
            .push(Op::Param, store.get(id).clone(), true, OpKind::Param)
            .expect("parameters must be finite");
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(self.shape_err(OpKind::MatMul, a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.grad_of(&[a, b]);
        self.push(
            Op::MatMul(a, b),
            Tensor::from_parts(vec![m, n], out),
            ng,
            OpKind::MatMul,
        )
    }

    fn broadcast(&self, kind: OpKind, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (r, c) = ta.dims2();
        let (br, bc) = tb.dims2();
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if br == 1 && bc == c {
            Ok(Broadcast::Row)
        } else if bc == 1 && br == r && ta.shape().len() == 2 {
            Ok(Broadcast::Col)
        } else {
            Err(self.shape_err(kind, a, b))
        }
    }

    fn binary(
        &mut self,
        kind: OpKind,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let bc = self.broadcast(kind, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let (_, cols) = ta.dims2();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[rhs_index(bc, i, cols)]))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let op = match kind {
            OpKind::Add => Op::Add(a, b, bc),
            OpKind::Sub => Op::Sub(a, b, bc),
            OpKind::Mul => Op::Mul(a, b, bc),
            _ => unreachable!(),
        };
        let ng = self.grad_of(&[a, b]);
        self.push(op, value, ng, kind)
    }

    /// Elementwise `a + b`; `b` may be broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(a, factor, 0.0)
            .map_err(|e| rename_nonfinite(e, OpKind::Scale))
    }

    /// `a * factor + shift`.
    pub fn affine(&mut self, a: NodeId, factor: f64, shift: f64) -> Result<NodeId> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor + shift).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.grad_of(&[a]);
        self.push(Op::Affine(a, factor), value, ng, OpKind::Affine)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut out = t.data().to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.grad_of(&[a]);
        self.push(Op::Softmax(a), value, ng, OpKind::SoftmaxLastDim)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut out = t.data().to_vec();
        for r in 0..rows {
            log_softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.grad_of(&[a]);
        self.push(Op::LogSoftmax(a), value, ng, OpKind::LogSoftmaxLastDim)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, OpKind::Log, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, OpKind::Exp, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, OpKind::Relu, Op::Relu(a), |x| x.max(0.0))
    }

    fn unary(&mut self, a: NodeId, kind: OpKind, op: Op, f: fn(f64) -> f64) -> Result<NodeId> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.grad_of(&[a]);
        self.push(op, value, ng, kind)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let v = t.sum() / t.len() as f64;
        let ng = self.grad_of(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(v), ng, OpKind::Mean)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).sum();
        let ng = self.grad_of(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(v), ng, OpKind::Sum)
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::invalid(
                "concat needs at least one input and axis 0 or 1",
            ));
        }
        let (r0, c0) = self.value(inputs[0]).dims2();
        for &id in &inputs[1..] {
            let (r, c) = self.value(id).dims2();
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(self.shape_err(OpKind::Concat, inputs[0], id));
            }
        }
        let value = if axis == 0 {
            let rows: usize = inputs.iter().map(|&i| self.value(i).dims2().0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &id in inputs {
                data.extend_from_slice(self.value(id).data());
            }
            Tensor::from_parts(vec![rows, c0], data)
        } else {
            let cols: usize = inputs.iter().map(|&i| self.value(i).dims2().1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &id in inputs {
                    data.extend_from_slice(self.value(id).row(r));
                }
            }
            Tensor::from_parts(vec![r0, cols], data)
        };
        let ng = self.grad_of(inputs);
        self.push(Op::Concat(inputs.to_vec(), axis), value, ng, OpKind::Concat)
    }

    /// Half-open slice `[start, end)` along `axis` of a matrix.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let limit = if axis == 0 { rows } else { cols };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} out of bounds for shape {:?}",
                t.shape()
            )));
        }
        let value = if axis == 0 {
            Tensor::from_parts(
                vec![end - start, cols],
                t.data()[start * cols..end * cols].to_vec(),
            )
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::from_parts(vec![rows, w], data)
        };
        let ng = self.grad_of(&[x]);
        self.push(Op::Slice { x, axis, start }, value, ng, OpKind::Slice)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let value = Tensor::from_parts(vec![cols, rows], transpose(t.data(), rows, cols));
        let ng = self.grad_of(&[x]);
        self.push(Op::Transpose(x), value, ng, OpKind::Transpose)
    }

    /// Gathers rows of `table` (`[vocab, d]`) into a `[ids.len(), d]` matrix.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (vocab, d) = t.dims2();
        if ids.is_empty() {
            return Err(Error::invalid("embedding-lookup: empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(format!(
                    "embedding-lookup: id {id} out of range for table of {vocab} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], data);
        let ng = self.grad_of(&[table]);
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            ng,
            OpKind::EmbeddingLookup,
        )
    }

    /// Row-wise layer normalisation with learned gain and bias over the last dim.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(self.shape_err(OpKind::LayerNorm, x, gain));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row(r);
            let (mean, inv_std) = row_stats(row, eps);
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) * inv_std * g[j] + b[j]),
            );
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.grad_of(&[x, gain, bias]);
        self.push(
            Op::LayerNorm { x, gain, bias, eps },
            value,
            ng,
            OpKind::LayerNorm,
        )
    }

    /// Negative log-likelihood of `target` under softmax(`logits`); `logits` is a
    /// single row of K class scores.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, k) = t.dims2();
        if rows != 1 {
            return Err(Error::invalid(format!(
                "cross-entropy: expected a single row of logits, got shape {:?}",
                t.shape()
            )));
        }
        if target >= k {
            return Err(Error::invalid(format!(
                "cross-entropy: target {target} out of range for {k} classes"
            )));
        }
        let mut ls = t.data().to_vec();
        log_softmax_row(&mut ls);
        let ng = self.grad_of(&[logits]);
        self.push(
            Op::CrossEntropy { logits, target },
            Tensor::scalar(-ls[target]),
            ng,
            OpKind::CrossEntropy,
        )
    }

    fn shape_err(&self, kind: OpKind, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op: kind.name(),
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Reverse sweep from a scalar `loss`. Every parameter leaf recorded in the
    /// graph gets an entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Gradients::new();
        for (&pid, &node) in &self.params {
            let g = if node.0 <= loss.0 {
                grads[node.0].take()
            } else {
                None
            };
            out.insert(
                pid,
                g.unwrap_or_else(|| Tensor::zeros(self.value(node).shape())),
            );
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                if self.needs(*a) {
                    // dA = G Bᵀ
                    let bt = transpose(tb.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), &bt, &mut da, m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ G
                    let at = transpose(ta.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, g.data(), &mut db, k, m, n);
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    self.acc(grads, *a, g.data().to_vec());
                }
                if self.needs(*b) {
                    let red =
                        reduce_broadcast(*bc, g.data(), None, y.dims2(), self.value(*b).len());
                    self.acc(grads, *b, red.into_iter().map(|v| v * sign).collect());
                }
            }
            Op::Mul(a, b, bc) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (_, cols) = ta.dims2();
                if self.needs(*a) {
                    let da = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data()[rhs_index(*bc, i, cols)])
                        .collect();
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let red = reduce_broadcast(*bc, g.data(), Some(ta.data()), y.dims2(), tb.len());
                    self.acc(grads, *b, red);
                }
            }
            Op::Affine(a, factor) => {
                self.acc(grads, *a, g.data().iter().map(|v| v * factor).collect());
            }
            Op::Softmax(a) => {
                let (rows, cols) = y.dims2();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = y.dims2();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dx[r * cols + j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.data().iter().zip(x).map(|(gv, xv)| gv / xv).collect(),
                );
            }
            Op::Exp(a) => {
                self.acc(
                    grads,
                    *a,
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv)
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let dx = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, dx);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g.item() / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g.item(); n]);
            }
            Op::Concat(inputs, axis) => {
                let (_, cols) = y.dims2();
                let mut offset = 0;
                for &id in inputs {
                    let (r, c) = self.value(id).dims2();
                    if self.needs(id) {
                        let piece = if *axis == 0 {
                            g.data()[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut p = Vec::with_capacity(r * c);
                            for row in 0..r {
                                let base = row * cols + offset;
                                p.extend_from_slice(&g.data()[base..base + c]);
                            }
                            p
                        };
                        self.acc(grads, id, piece);
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { x, axis, start } => {
                let (rows, cols) = self.value(*x).dims2();
                let (gr, gc) = y.dims2();
                let mut dx = vec![0.0; rows * cols];
                if *axis == 0 {
                    dx[start * cols..(start + gr) * cols].copy_from_slice(g.data());
                } else {
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + gc]
                            .copy_from_slice(&g.data()[r * gc..(r + 1) * gc]);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Transpose(x) => {
                let (rows, cols) = y.dims2();
                self.acc(grads, *x, transpose(g.data(), rows, cols));
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2();
                let mut dt = vec![0.0; vocab * d];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[pos * d + j];
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = self.value(*x);
                let gv = self.value(*gain).data();
                let (rows, cols) = tx.dims2();
                let n = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = tx.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let (mean, inv_std) = row_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1: f64 = dxhat.iter().sum::<f64>() / n;
                    let m2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..cols {
                        dx[r * cols + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                if self.needs(*x) {
                    self.acc(grads, *x, dx);
                }
                if self.needs(*gain) {
                    self.acc(grads, *gain, dgain);
                }
                if self.needs(*bias) {
                    self.acc(grads, *bias, dbias);
                }
            }
            Op::CrossEntropy { logits, target } => {
                let mut p = self.value(*logits).data().to_vec();
                softmax_row(&mut p);
                p[*target] -= 1.0;
                let s = g.item();
                self.acc(grads, *logits, p.into_iter().map(|v| v * s).collect());
            }
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Vec<f64>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(id).to_vec(), delta));
            }
        }
    }
}

fn rename_nonfinite(e: Error, kind: OpKind) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFinite { op: kind.name() },
        other => other,
    }
}

#[inline]
fn rhs_index(bc: Broadcast, i: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

/// Sums `g` (optionally times `lhs`) down to the broadcast operand's layout.
fn reduce_broadcast(
    bc: Broadcast,
    g: &[f64],
    lhs: Option<&[f64]>,
    (_, cols): (usize, usize),
    len: usize,
) -> Vec<f64> {
    let term = |i: usize| match lhs {
        Some(x) => g[i] * x[i],
        None => g[i],
    };
    let mut out = vec![0.0; len];
    for i in 0..g.len() {
        out[rhs_index(bc, i, cols)] += term(i);
    }
    out
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}
