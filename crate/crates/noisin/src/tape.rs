//! Reverse-mode gradient tape.
//!
//! Operations append nodes to an arena in execution order; node inputs can
//! only reference earlier nodes, so creation order is a topological order
//! and the backward sweep is a single reverse scan (cycles cannot be
//! constructed). Gradients accumulate additively across fan-out. Forward
//! values are computed by the same `tensor` kernels as the plain code paths,
//! so a taped forward is bit-identical to an untaped one.
//!
//! Noise draws and data enter as [`Tape::constant`] nodes: gradients stop
//! there, which is exactly the objective's treatment of exogenous noise.

use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Scale(NodeId, f64),
    GatherRows(NodeId, Vec<usize>),
    GatherCols(NodeId, Vec<usize>),
    LogSumExpRows(NodeId),
    SumAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Data, noise draws, detached carries: no gradient flows into these.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = tensor::add_row_broadcast(self.value(a), self.value(row))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = tensor::tanh(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = tensor::exp(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = tensor::softplus(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = tensor::scale(self.value(a), c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = tensor::gather_rows(self.value(a), ids)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::GatherRows(a, ids.to_vec()), rg))
    }

    pub fn gather_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let v = tensor::gather_cols(self.value(a), cols)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::GatherCols(a, cols.to_vec()), rg))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::logsumexp_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::LogSumExpRows(a), rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Exact reverse-mode gradients of a scalar loss with respect to every
    /// reachable differentiable node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let up = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(up);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = tensor::matmul_nt(&up, self.value(*b))?;
                        accumulate(&mut grads, a.0, da)?;
                    }
                    if self.rg(*b) {
                        let db = tensor::matmul_tn(self.value(*a), &up)?;
                        accumulate(&mut grads, b.0, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, up.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, b.0, up)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, up.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, b.0, tensor::scale(&up, -1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, tensor::mul(&up, self.value(*b))?)?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, b.0, tensor::mul(&up, self.value(*a))?)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, up.clone())?;
                    }
                    if self.rg(*row) {
                        accumulate(&mut grads, row.0, tensor::sum_rows_to_row(&up)?)?;
                    }
                }
                Op::Sigmoid(a) => {
                    if self.rg(*a) {
                        let y = &self.nodes[idx].value;
                        let dy = Tensor::from_fn(y.shape(), |i| {
                            let yi = y.data()[i];
                            up.data()[i] * yi * (1.0 - yi)
                        });
                        accumulate(&mut grads, a.0, dy)?;
                    }
                }
                Op::Tanh(a) => {
                    if self.rg(*a) {
                        let y = &self.nodes[idx].value;
                        let dy = Tensor::from_fn(y.shape(), |i| {
                            let yi = y.data()[i];
                            up.data()[i] * (1.0 - yi * yi)
                        });
                        accumulate(&mut grads, a.0, dy)?;
                    }
                }
                Op::Exp(a) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, tensor::mul(&up, &self.nodes[idx].value)?)?;
                    }
                }
                Op::Softplus(a) => {
                    if self.rg(*a) {
                        let x = self.value(*a);
                        let dy = Tensor::from_fn(x.shape(), |i| {
                            up.data()[i] * tensor::sigmoid_scalar(x.data()[i])
                        });
                        accumulate(&mut grads, a.0, dy)?;
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, tensor::scale(&up, *c))?;
                    }
                }
                Op::GatherRows(a, ids) => {
                    if self.rg(*a) {
                        let src = self.value(*a);
                        let (_, n) = src.dims2()?;
                        let mut da = Tensor::zeros(src.shape());
                        for (i, &id) in ids.iter().enumerate() {
                            let urow = &up.data()[i * n..(i + 1) * n];
                            let drow = &mut da.data_mut()[id * n..(id + 1) * n];
                            for (d, &u) in drow.iter_mut().zip(urow) {
                                *d += u;
                            }
                        }
                        accumulate(&mut grads, a.0, da)?;
                    }
                }
                Op::GatherCols(a, cols) => {
                    if self.rg(*a) {
                        let src = self.value(*a);
                        let (_, n) = src.dims2()?;
                        let mut da = Tensor::zeros(src.shape());
                        for (i, &c) in cols.iter().enumerate() {
                            da.data_mut()[i * n + c] += up.data()[i];
                        }
                        accumulate(&mut grads, a.0, da)?;
                    }
                }
                Op::LogSumExpRows(a) => {
                    if self.rg(*a) {
                        let sm = tensor::softmax_rows(self.value(*a))?;
                        let (m, n) = sm.dims2()?;
                        let da = Tensor::from_fn(&[m, n], |i| {
                            let r = i / n;
                            sm.data()[i] * up.data()[r]
                        });
                        accumulate(&mut grads, a.0, da)?;
                    }
                }
                Op::SumAll(a) => {
                    if self.rg(*a) {
                        let u = up.item()?;
                        accumulate(&mut grads, a.0, Tensor::full(self.value(*a).shape(), u))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(g) => tensor::axpy(g, 1.0, &delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}
