//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order, which is also a topological order;
//! `backward` walks them in reverse exactly once. A node requires a gradient
//! iff it is a trainable leaf or any of its inputs requires one, so frozen
//! parameters never accumulate gradient.

use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Softmax(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    RowSelect { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor<T> },
    Sum(NodeId),
    LayerNorm { input: NodeId, gain: NodeId, bias: NodeId, normed: Tensor<T>, inv_std: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Transpose(a), v, rg))
    }

    /// Element-wise sum, or a row-broadcast when `b` is a bias vector.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let op = if va.shape() == vb.shape() {
            Op::Add(a, b)
        } else if va.is_broadcast_row(vb) {
            Op::AddRow(a, b)
        } else {
            return Err(Error::dims("add", va.shape(), vb.shape()));
        };
        let v = va.add(vb)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(op, v, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.masked_row_softmax(a, None)
    }

    /// Row softmax with excluded columns pinned to weight zero.
    pub fn masked_row_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let v = self.value(a).masked_row_softmax(mask)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Softmax(a), v, rg))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.stack_rows(&[a, b])
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        let rg = self.needs(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        let rg = self.needs(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_rows(start, len)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::SliceRows { input: a, start }, v, rg))
    }

    /// Gathers rows of `table`; the gradient is scattered back to those rows only.
    pub fn row_select(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = self.value(table).select_rows(ids)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            Op::RowSelect {
                table,
                ids: ids.to_vec(),
            },
            v,
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under the row softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = self.value(logits).cross_entropy(labels)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (v, normed, inv_std) =
            self.value(input)
                .layer_norm(self.value(gain), self.value(bias), eps)?;
        let rg = self.needs(&[input, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                input,
                gain,
                bias,
                normed,
                inv_std,
            },
            v,
            rg,
        ))
    }

    /// Populates gradients of every node that requires one, seeded with
    /// d loss / d loss = 1. Gradients from an earlier call are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any trainable tensor".into(),
            ));
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g)?;
            self.nodes[idx].grad = Some(g);
            for (target, delta) in contributions {
                self.accumulate(target, delta);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, delta: Tensor<T>) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    out.push((*a, g.matmul(&self.value(*b).transpose()?)?));
                }
                if rg(*b) {
                    out.push((*b, self.value(*a).transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose()?)),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRow(a, b) => {
                out.push((*a, g.clone()));
                if rg(*b) {
                    let c = g.cols();
                    let mut col_sums = vec![T::zero(); c];
                    for i in 0..g.rows() {
                        for (s, &v) in col_sums.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    out.push((*b, Tensor::new(shape, col_sums)?));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.scale(*c))),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Softmax(a) => {
                // dx = y * (g - sum_j g_j y_j), row by row
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for (d, (&yv, &gv)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*a, dx));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).rows();
                    if rg(p) {
                        out.push((p, g.slice_rows(start, len)?));
                    }
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if rg(p) {
                        let rows = g.rows();
                        let mut data = Vec::with_capacity(rows * width);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[offset..offset + width]);
                        }
                        out.push((p, Tensor::matrix(rows, width, data)?));
                    }
                    offset += width;
                }
            }
            Op::SliceRows { input, start } => {
                let x = self.value(*input);
                let mut dx = Tensor::zeros(x.shape());
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                out.push((*input, dx));
            }
            Op::RowSelect { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                out.push((*table, dt));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = T::from_usize(labels.len()).expect("batch fits scalar");
                let upstream = g.data()[0] / n;
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    let row = d.row_mut(i);
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= upstream;
                    }
                }
                out.push((*logits, d));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                out.push((*a, Tensor::full(&shape, g.data()[0])));
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gain_v = self.value(*gain);
                let (m, n) = (normed.rows(), normed.cols());
                let nf = T::from_usize(n).expect("row width fits scalar");
                if rg(*input) {
                    let mut dx = Tensor::zeros(normed.shape());
                    for i in 0..m {
                        let xh = normed.row(i);
                        let gr = g.row(i);
                        let dxh: Vec<T> = gr.iter().zip(gain_v.data()).map(|(&a, &b)| a * b).collect();
                        let mean_dxh = dxh.iter().fold(T::zero(), |a, &v| a + v) / nf;
                        let mean_dxh_xh = dxh
                            .iter()
                            .zip(xh)
                            .fold(T::zero(), |a, (&d, &x)| a + d * x)
                            / nf;
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    out.push((*input, dx));
                }
                if rg(*gain) || rg(*bias) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g.row(i)[j] * normed.row(i)[j];
                            db[j] += g.row(i)[j];
                        }
                    }
                    out.push((*gain, Tensor::new(gain_v.shape().to_vec(), dg)?));
                    out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?));
                }
            }
        }
        Ok(out)
    }
}
