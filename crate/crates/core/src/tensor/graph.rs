use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Narrow { x: NodeId, axis: usize, start: usize },
    GatherRows(NodeId, Vec<usize>),
    SumAxis { x: NodeId, axis: usize },
    L2Norm { x: NodeId, axis: usize },
    Softmax(NodeId),
    MaskedFill(NodeId, Vec<bool>),
    Squash { x: NodeId, eps: f64 },
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    CrossEntropy { logits: NodeId, probs: Tensor, targets: Vec<Option<usize>>, scale: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows(..) => "gather_rows",
            Op::SumAxis { .. } => "sum_axis",
            Op::L2Norm { .. } => "l2_norm",
            Op::Softmax(..) => "softmax",
            Op::MaskedFill(..) => "masked_fill",
            Op::Squash { .. } => "squash",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of executed operations. Nodes are appended in execution order, so
/// the node list is already topologically sorted.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf: gradients are recorded for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_ref(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn check_same_graph(&self, v: Var<'_>) {
        assert!(std::ptr::eq(self, v.graph), "variables from different graphs");
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        parts.iter().for_each(|p| self.check_same_graph(*p));
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            kernels::concat(&refs, axis)?
        };
        let rg = parts.iter().any(|p| self.requires(p.id));
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg))
    }

    /// Stacks equally shaped variables along a new axis.
    pub fn stack<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let expanded = parts
            .iter()
            .map(|p| {
                let mut shape = p.shape();
                if axis > shape.len() {
                    return Err(Error::dim("stack", &shape, &[axis]));
                }
                shape.insert(axis, 1);
                p.reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&expanded, axis)
    }

    /// Reverse pass from a scalar `loss`. Fails if called again before [`Graph::reset_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check_same_graph(loss);
        if self.backward_done.get() {
            return Err(Error::Contract(
                "backward called twice without resetting gradients".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut first_bad: Option<&'static str> = None;

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in backward_op(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                if first_bad.is_none() && !contribution.is_finite() {
                    first_bad = Some(node.op.name());
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        if let Some(op) = first_bad {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(())
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    /// Name of the first recorded operation whose output is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .borrow()
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.op.name())
    }
}

fn backward_op(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
    let val = |id: NodeId| &nodes[id].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add(a, b) => vec![
            (*a, kernels::sum_to_shape(g, val(*a).shape())),
            (*b, kernels::sum_to_shape(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, kernels::sum_to_shape(g, val(*a).shape())),
            (*b, kernels::sum_to_shape(&g.map(|v| -v), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                let ga = kernels::binary("mul", g, val(*b), |x, y| x * y).expect("broadcast");
                out.push((*a, kernels::sum_to_shape(&ga, val(*a).shape())));
            }
            if nodes[*b].requires_grad {
                let gb = kernels::binary("mul", g, val(*a), |x, y| x * y).expect("broadcast");
                out.push((*b, kernels::sum_to_shape(&gb, val(*b).shape())));
            }
            out
        }
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
        Op::Relu(x) => {
            let data = g
                .data()
                .iter()
                .zip(val(*x).data())
                .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::Reshape(x) => vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec()))],
        Op::Permute(x, axes) => {
            let inv = kernels::inverse_permutation(axes);
            vec![(*x, kernels::permute(g, &inv).expect("valid permutation"))]
        }
        Op::Concat(xs, axis) => {
            let mut start = 0;
            xs.iter()
                .map(|&x| {
                    let len = val(x).shape()[*axis];
                    let part = kernels::narrow(g, *axis, start, len).expect("concat layout");
                    start += len;
                    (x, part)
                })
                .collect()
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(*x).shape();
            let (outer, extent, inner) = kernels::axis_split(shape, *axis);
            let len = g.shape()[*axis];
            let mut out = vec![0.0; val(*x).len()];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let base = o * extent * inner + start * inner;
                out[base..base + len * inner].copy_from_slice(src);
            }
            vec![(*x, Tensor::from_parts(shape.to_vec(), out))]
        }
        Op::GatherRows(table, ids) => {
            let shape = val(*table).shape();
            let w = shape[1];
            let mut out = vec![0.0; val(*table).len()];
            for (row, &id) in ids.iter().enumerate() {
                for (d, s) in out[id * w..(id + 1) * w].iter_mut().zip(&g.data()[row * w..(row + 1) * w]) {
                    *d += s;
                }
            }
            vec![(*table, Tensor::from_parts(shape.to_vec(), out))]
        }
        Op::SumAxis { x, axis } => {
            let mut kept = val(*x).shape().to_vec();
            kept[*axis] = 1;
            let gk = Tensor::from_parts(kept, g.data().to_vec());
            let ones = Tensor::ones(val(*x).shape());
            vec![(*x, kernels::binary("sum_axis", &ones, &gk, |_, b| b).expect("broadcast"))]
        }
        Op::L2Norm { x, axis } => {
            let xv = val(*x);
            let mut kept = xv.shape().to_vec();
            kept[*axis] = 1;
            let norm = Tensor::from_parts(kept.clone(), node.value.data().to_vec());
            let gk = Tensor::from_parts(kept, g.data().to_vec());
            let unit = kernels::binary("l2_norm", xv, &norm, |a, n| if n > 0.0 { a / n } else { 0.0 })
                .expect("broadcast");
            vec![(*x, kernels::binary("l2_norm", &unit, &gk, |u, gv| u * gv).expect("broadcast"))]
        }
        Op::Softmax(x) => vec![(*x, kernels::softmax_rows_backward(&node.value, g))],
        Op::MaskedFill(x, mask) => {
            let data = g
                .data()
                .iter()
                .zip(mask)
                .map(|(&gv, &m)| if m { 0.0 } else { gv })
                .collect();
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::Squash { x, eps } => vec![(*x, kernels::squash_rows_backward(val(*x), g, *eps))],
        Op::LayerNorm { x, inv_std } => {
            vec![(*x, kernels::layer_norm_rows_backward(&node.value, inv_std, g))]
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            scale,
        } => {
            let w = kernels::last_axis(probs.shape());
            let upstream = g.item() * scale;
            let mut out = vec![0.0; probs.len()];
            for (row, target) in targets.iter().enumerate() {
                let Some(t) = target else { continue };
                let dst = &mut out[row * w..(row + 1) * w];
                for (d, p) in dst.iter_mut().zip(&probs.data()[row * w..(row + 1) * w]) {
                    *d = p * upstream;
                }
                dst[*t] -= upstream;
            }
            vec![(*logits, Tensor::from_parts(probs.shape().to_vec(), out))]
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_ref(self.id).shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.graph.value_ref(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.graph.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary_op(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        self.graph.check_same_graph(other);
        let value = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(other.id);
            kernels::binary(name, &a, &b, f)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, op, rg))
    }

    /// Matrix product over the last two axes with broadcasting leading batch axes.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check_same_graph(other);
        let value = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(other.id);
            kernels::matmul(&a, &b)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let value = self.graph.value_ref(self.id).map(|v| v * c);
        self.unary(value, Op::Scale(self.id, c))
    }

    pub fn relu(self) -> Var<'g> {
        let value = self.graph.value_ref(self.id).map(|v| v.max(0.0));
        self.unary(value, Op::Relu(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.graph.value_ref(self.id).reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let value = kernels::permute(&self.graph.value_ref(self.id), axes)?;
        Ok(self.unary(value, Op::Permute(self.id, axes.to_vec())))
    }

    pub fn transpose_last_two(self) -> Result<Var<'g>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::dim("transpose_last_two", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = kernels::narrow(&self.graph.value_ref(self.id), axis, start, len)?;
        Ok(self.unary(value, Op::Narrow { x: self.id, axis, start }))
    }

    /// Rows of a `(rows, width)` table picked by `ids`; the embedding lookup.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'g>> {
        let value = {
            let table = self.graph.value_ref(self.id);
            if table.rank() != 2 || ids.is_empty() {
                return Err(Error::dim("gather_rows", table.shape(), &[ids.len()]));
            }
            let (rows, w) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * w);
            for &id in ids {
                if id >= rows {
                    return Err(Error::Input(format!("row index {id} out of range for {rows} rows")));
                }
                data.extend_from_slice(&table.data()[id * w..(id + 1) * w]);
            }
            Tensor::from_parts(vec![ids.len(), w], data)
        };
        Ok(self.unary(value, Op::GatherRows(self.id, ids.to_vec())))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let value = kernels::sum_axis(&self.graph.value_ref(self.id), axis, keepdim)?;
        Ok(self.unary(value, Op::SumAxis { x: self.id, axis }))
    }

    pub fn sum_all(self) -> Result<Var<'g>> {
        let n = self.graph.value_ref(self.id).len();
        self.reshape(&[n])?.sum_axis(0, false)
    }

    /// Euclidean norm along `axis`, which is removed. The gradient at a zero vector is taken as 0.
    pub fn l2_norm(self, axis: usize) -> Result<Var<'g>> {
        let value = {
            let x = self.graph.value_ref(self.id);
            kernels::sum_axis(&x.map(|v| v * v), axis, false)?.map(f64::sqrt)
        };
        Ok(self.unary(value, Op::L2Norm { x: self.id, axis }))
    }

    /// Softmax over the last axis. Slices consisting solely of
    /// [`MASK_SENTINEL`](super::MASK_SENTINEL) map to all zeros.
    pub fn softmax(self) -> Var<'g> {
        let value = kernels::softmax_rows(&self.graph.value_ref(self.id));
        self.unary(value, Op::Softmax(self.id))
    }

    /// Replaces entries where the broadcast `mask` is true by `sentinel`.
    pub fn masked_fill(self, mask: &[bool], mask_shape: &[usize], sentinel: f64) -> Result<Var<'g>> {
        if mask.len() != mask_shape.iter().product::<usize>() {
            return Err(Error::dim("masked_fill", mask_shape, &[mask.len()]));
        }
        let (value, full) = {
            let x = self.graph.value_ref(self.id);
            let full = kernels::expand_mask(mask, mask_shape, x.shape())?;
            let data = x
                .data()
                .iter()
                .zip(&full)
                .map(|(&v, &m)| if m { sentinel } else { v })
                .collect();
            (Tensor::from_parts(x.shape().to_vec(), data), full)
        };
        Ok(self.unary(value, Op::MaskedFill(self.id, full)))
    }

    /// Squashing nonlinearity applied to each last-axis vector.
    pub fn squash(self, eps: f64) -> Var<'g> {
        let value = kernels::squash_rows(&self.graph.value_ref(self.id), eps);
        self.unary(value, Op::Squash { x: self.id, eps })
    }

    /// Zero-mean, unit-variance normalization of each last-axis row (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let (value, inv_std) = kernels::layer_norm_rows(&self.graph.value_ref(self.id), eps);
        self.unary(value, Op::LayerNorm { x: self.id, inv_std })
    }

    /// Token-level cross entropy of `(T, V)` logits. Rows whose target equals
    /// `ignore` are excluded from both the loss and the mean's denominator.
    pub fn cross_entropy(self, targets: &[usize], ignore: Option<usize>, reduction: Reduction) -> Result<Var<'g>> {
        let (loss, probs, kept) = {
            let logits = self.graph.value_ref(self.id);
            if logits.rank() != 2 || logits.shape()[0] != targets.len() {
                return Err(Error::dim("cross_entropy", logits.shape(), &[targets.len()]));
            }
            let v = logits.shape()[1];
            let mut kept = Vec::with_capacity(targets.len());
            for &t in targets {
                if t >= v {
                    return Err(Error::Input(format!("target {t} outside vocabulary of {v}")));
                }
                kept.push((Some(t) != ignore).then_some(t));
            }
            let probs = kernels::softmax_rows(&logits);
            let mut loss = 0.0;
            for (row, t) in kept.iter().enumerate() {
                let Some(t) = t else { continue };
                let r = &logits.data()[row * v..(row + 1) * v];
                let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - r[*t];
            }
            (loss, probs, kept)
        };
        let count = kept.iter().filter(|t| t.is_some()).count();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if count == 0 => 0.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            probs,
            targets: kept,
            scale,
        };
        Ok(self.unary(Tensor::scalar(loss * scale), op))
    }

    /// Same value, cut out of the gradient path.
    pub fn detach(self) -> Var<'g> {
        let value = self.value();
        self.graph.constant(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_column_selection() {
        let g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        assert_eq!(i2.matmul(i2).unwrap().value(), Tensor::eye(2));
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let col = g.constant(t(&[2, 1], &[0., 1.]));
        assert_eq!(a.matmul(col).unwrap().value().data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let y = g.constant(t(&[2], &[0., 0.])).softmax().value();
        assert_eq!(y.data(), &[0.5, 0.5]);
        for x in [-3.0, 0.0, 17.5] {
            let y = g.constant(Tensor::full(&[4], x)).softmax().value();
            assert_eq!(y.data(), &[0.25; 4]);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[super::super::MASK_SENTINEL, super::super::MASK_SENTINEL, 1.0, 2.0]));
        let y = x.softmax();
        assert_eq!(&y.value().data()[..2], &[0.0, 0.0]);
        let loss = y.sum_all().unwrap();
        g.backward(loss).unwrap();
        assert!(x.grad().unwrap().is_finite());
    }

    #[test]
    fn masked_fill_examples() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let y = x.masked_fill(&[false, true], &[2], 0.0).unwrap();
        assert_eq!(y.value().data(), &[1., 0.]);
        let same = x.masked_fill(&[false, false], &[2], 0.0).unwrap();
        assert_eq!(same.value(), x.value());

        let m = g.leaf(Tensor::ones(&[3, 3]));
        let causal: Vec<bool> = (0..9).map(|i| i % 3 > i / 3).collect();
        let y = m.masked_fill(&causal, &[3, 3], 0.0).unwrap().value();
        assert_eq!(y.data().iter().filter(|&&v| v == 0.0).count(), 3);
        assert_eq!(y.get(&[0, 1]), 0.0);
        assert_eq!(y.get(&[0, 2]), 0.0);
        assert_eq!(y.get(&[1, 2]), 0.0);

        let loss = y.sum();
        assert_eq!(loss, 6.0);
        let s = m.masked_fill(&causal, &[3, 3], 0.0).unwrap().sum_all().unwrap();
        g.backward(s).unwrap();
        let gm = m.grad().unwrap();
        assert_eq!(gm.get(&[0, 2]), 0.0);
        assert_eq!(gm.get(&[2, 0]), 1.0);
    }

    #[test]
    fn l2_norm_pythagorean() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[3., 4.]));
        assert_eq!(x.l2_norm(0).unwrap().item(), 5.0);
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let s = g.stack(&[a, b], 0).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert_eq!(s.narrow(0, 0, 1).unwrap().reshape(&[2]).unwrap().value(), a.value());
        assert_eq!(s.narrow(0, 1, 1).unwrap().reshape(&[2]).unwrap().value(), b.value());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1., -2., 3., 0.5]));
        let loss = x.sum_all().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), Tensor::ones(&[2, 2]));

        let g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1., -2., 3., 0.5]));
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), x.value().map(|v| 2.0 * v));
    }

    #[test]
    fn backward_contract_errors() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let loss = x.sum_all().unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(loss).unwrap();
    }

    #[test]
    fn unreachable_leaf_gets_no_grad() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let y = g.leaf(Tensor::ones(&[2]));
        let loss = x.sum_all().unwrap();
        g.backward(loss).unwrap();
        assert!(x.grad().is_some());
        assert!(y.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 3.0));
        let d = x.detach();
        let loss = x.mul(d).unwrap().sum_all().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[3, 5]));
        let loss = logits.cross_entropy(&[1, 0, 4], Some(0), Reduction::Mean).unwrap();
        assert!((loss.item() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn non_finite_backward_names_op() {
        let g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[f64::NAN, 1.0]));
        let loss = x.softmax().sum_all().unwrap();
        assert_eq!(g.first_non_finite(), Some("leaf"));
        match g.backward(loss) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "softmax"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
