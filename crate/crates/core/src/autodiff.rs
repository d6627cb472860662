//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so walking the tape backwards visits them in
//! reverse topological order. A node's gradient is the sum over all of its uses.
//!
//! The graph is single-threaded (`!Sync`); kernels may parallelize internally.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Abs(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Broadcast(NodeId),
    Slice { src: NodeId, axis: usize, start: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    SumAll(NodeId),
    SumAxis(NodeId, usize),
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    AvgPool(NodeId, usize),
    Gather { field: NodeId, xs: NodeId, ys: NodeId },
    Softmax(NodeId),
    MaxMinPool { src: NodeId, argext: Vec<usize> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The recording tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
    smooth_margin: Cell<f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            macs: Cell::new(0),
            smooth_margin: Cell::new(f64::INFINITY),
        }
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate count of matrix products and convolutions so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Total bytes held by node values, an estimate of peak forward memory.
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.len() * std::mem::size_of::<f64>())
            .sum()
    }

    /// Smallest distance, over all gradient-carrying inputs, to a max/min tie
    /// or a bilinear cell boundary. `INFINITY` if none was recorded.
    pub fn smooth_margin(&self) -> f64 {
        self.smooth_margin.get()
    }

    fn note_margin(&self, m: f64) {
        if m < self.smooth_margin.get() {
            self.smooth_margin.set(m);
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_flag(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn derived(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let rg = inputs.iter().any(|&i| self.grad_flag(i));
        self.push(value, op, rg)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = ops::concat(&refs, axis)?;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(self.derived(out, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Reverse pass from a single-element `output`, seeded with 1.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if output.value().len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must hold one value, got {:?}", output.shape()),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(output.value().shape()));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn add_grad(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| nodes[id].value.as_ref();
    let needs = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_grad(nodes, grads, *a, g.clone());
            add_grad(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            add_grad(nodes, grads, *a, g.clone());
            add_grad(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                add_grad(nodes, grads, *a, g.zip_map(val(*b), |g, y| g * y).unwrap());
            }
            if needs(*b) {
                add_grad(nodes, grads, *b, g.zip_map(val(*a), |g, x| g * x).unwrap());
            }
        }
        Op::Scale(a, c) => add_grad(nodes, grads, *a, g.map(|x| x * c)),
        Op::AddScalar(a) => add_grad(nodes, grads, *a, g.clone()),
        Op::Tanh(a) => {
            let y = node.value.as_ref();
            add_grad(nodes, grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y)).unwrap());
        }
        Op::Sigmoid(a) => {
            let y = node.value.as_ref();
            add_grad(nodes, grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y)).unwrap());
        }
        Op::Relu(a) => {
            let x = val(*a);
            add_grad(nodes, grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }).unwrap());
        }
        Op::Sin(a) => add_grad(nodes, grads, *a, g.zip_map(val(*a), |g, x| g * x.cos()).unwrap()),
        Op::Cos(a) => add_grad(nodes, grads, *a, g.zip_map(val(*a), |g, x| -g * x.sin()).unwrap()),
        Op::Abs(a) => add_grad(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                .unwrap(),
        ),
        Op::Reshape(a) => add_grad(nodes, grads, *a, g.reshape(val(*a).shape()).unwrap()),
        Op::Permute(a, axes) => {
            let inv = ops::inverse_permutation(axes);
            add_grad(nodes, grads, *a, ops::permute(g, &inv).unwrap());
        }
        Op::Broadcast(a) => add_grad(nodes, grads, *a, ops::unbroadcast(g, val(*a).shape())),
        Op::Slice { src, axis, start } => {
            if needs(*src) {
                let shape = val(*src).shape().to_vec();
                let (axis, start) = (*axis, *start);
                let len = g.shape()[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[axis];
                let mut full = Tensor::zeros(&shape);
                for o in 0..outer {
                    full.data_mut()[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                add_grad(nodes, grads, *src, full);
            }
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if needs(p) {
                    add_grad(nodes, grads, p, ops::slice_axis(g, *axis, start, len).unwrap());
                }
                start += len;
            }
        }
        Op::SumAll(a) => add_grad(nodes, grads, *a, Tensor::full(val(*a).shape(), g.data()[0])),
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape().to_vec();
            let mut kept = shape.clone();
            kept[*axis] = 1;
            let g = g.reshape(&kept).unwrap();
            add_grad(nodes, grads, *a, ops::broadcast_to(&g, &shape).unwrap());
        }
        Op::MatMul(a, b) => {
            let (ga, gb) = ops::batched_matmul_backward(val(*a), val(*b), g, needs(*a), needs(*b));
            if let Some(ga) = ga {
                add_grad(nodes, grads, *a, ga);
            }
            if let Some(gb) = gb {
                add_grad(nodes, grads, *b, gb);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (gx, gw, gb) = ops::conv2d_backward(
                val(*x),
                val(*w),
                *stride,
                *pad,
                g,
                needs(*x),
                needs(*w) || needs(*b),
            );
            if let Some(gx) = gx {
                add_grad(nodes, grads, *x, gx);
            }
            if let Some(gw) = gw {
                add_grad(nodes, grads, *w, gw);
            }
            if let Some(gb) = gb {
                add_grad(nodes, grads, *b, gb);
            }
        }
        Op::AvgPool(a, k) => {
            add_grad(nodes, grads, *a, ops::avg_pool2d_backward(val(*a).shape(), *k, g));
        }
        Op::Gather { field, xs, ys } => {
            let gg = ops::bilinear_gather_backward(val(*field), val(*xs), val(*ys), g);
            add_grad(nodes, grads, *field, gg.field);
            add_grad(nodes, grads, *xs, gg.xs);
            add_grad(nodes, grads, *ys, gg.ys);
        }
        Op::Softmax(a) => add_grad(nodes, grads, *a, ops::softmax_backward(&node.value, g)),
        Op::MaxMinPool { src, argext } => {
            let shape = val(*src).shape().to_vec();
            let c = shape[0];
            let hw = shape[1] * shape[2];
            let mut gx = Tensor::zeros(&shape);
            for (k, &i) in argext.iter().enumerate() {
                let ch = k % c;
                gx.data_mut()[ch * hw + i] += g.data()[k];
            }
            add_grad(nodes, grads, *src, gx);
        }
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`, or `None`
    /// when `v` does not influence it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.grad_flag(self.id)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.value().map(f);
        self.graph.derived(out, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let out = a.zip_map(&b, f)?;
        Ok(self.graph.derived(out, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sin(self) -> Var<'g> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'g> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.derived(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let out = ops::permute(&self.value(), axes)?;
        Ok(self
            .graph
            .derived(out, Op::Permute(self.id, axes.to_vec()), &[self.id]))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = ops::broadcast_to(&self.value(), shape)?;
        Ok(self.graph.derived(out, Op::Broadcast(self.id), &[self.id]))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let out = ops::slice_axis(&self.value(), axis, start, len)?;
        Ok(self.graph.derived(
            out,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.derived(out, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let out = ops::sum_axis(&self.value(), axis)?;
        Ok(self.graph.derived(out, Op::SumAxis(self.id, axis), &[self.id]))
    }

    /// Batched `[B,n,k] x [B,k,m]`; rank-2 operands are treated as `B = 1`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() == 2 && b.rank() == 2 {
            let (n, m) = (a.shape()[0], b.shape()[1]);
            let a3 = self.reshape(&[1, a.shape()[0], a.shape()[1]])?;
            let b3 = other.reshape(&[1, b.shape()[0], b.shape()[1]])?;
            return a3.matmul(b3)?.reshape(&[n, m]);
        }
        let out = ops::batched_matmul(&a, &b)?;
        let (bs, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let m = b.shape()[2];
        self.graph.macs.set(self.graph.macs() + (bs * n * k * m) as u64);
        Ok(self
            .graph
            .derived(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let out = ops::conv2d(&x, &w, &b, stride, pad)?;
        let macs = out.len() * w.shape()[1] * w.shape()[2] * w.shape()[3];
        self.graph.macs.set(self.graph.macs() + macs as u64);
        Ok(self.graph.derived(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                stride,
                pad,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    pub fn avg_pool2d(self, k: usize) -> Result<Var<'g>> {
        let out = ops::avg_pool2d(&self.value(), k)?;
        Ok(self.graph.derived(out, Op::AvgPool(self.id, k), &[self.id]))
    }

    /// Bilinear gather from a `[B,H,W]` field at per-plane coordinates
    /// `xs`, `ys` of shape `[B,n]`.
    pub fn gather_bilinear(self, xs: Var<'g>, ys: Var<'g>) -> Result<Var<'g>> {
        let (f, x, y) = (self.value(), xs.value(), ys.value());
        let out = ops::bilinear_gather(&f, &x, &y)?;
        for (coords, var) in [(&x, xs), (&y, ys)] {
            if var.requires_grad() {
                let m = coords
                    .data()
                    .iter()
                    .map(|&c| ops::lattice_margin(c))
                    .fold(f64::INFINITY, f64::min);
                self.graph.note_margin(m);
            }
        }
        Ok(self.graph.derived(
            out,
            Op::Gather {
                field: self.id,
                xs: xs.id,
                ys: ys.id,
            },
            &[self.id, xs.id, ys.id],
        ))
    }

    /// `[C,H,W]` field sampled at shared coordinates `xs`, `ys` of shape `[n]`.
    pub fn bilinear_sample(self, xs: Var<'g>, ys: Var<'g>) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::shape("bilinear_sample", format!("field must be [C,H,W], got {shape:?}")));
        }
        let n = xs.value().len();
        let target = [shape[0], n];
        let xs = xs.reshape(&[1, n])?.broadcast_to(&target)?;
        let ys = ys.reshape(&[1, n])?.broadcast_to(&target)?;
        self.gather_bilinear(xs, ys)
    }

    pub fn softmax(self) -> Var<'g> {
        let out = ops::softmax(&self.value());
        self.graph.derived(out, Op::Softmax(self.id), &[self.id])
    }

    pub fn global_max_min_pool(self) -> Result<Var<'g>> {
        let (out, argext, gap) = ops::global_max_min_pool_indexed(&self.value())?;
        if self.requires_grad() {
            self.graph.note_margin(gap);
        }
        Ok(self.graph.derived(
            out,
            Op::MaxMinPool {
                src: self.id,
                argext,
            },
            &[self.id],
        ))
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_and_fan_out() {
        let g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![3.0]));
        // y = x*x + x  => dy/dx = 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let x = g.variable(Tensor::from_vec(vec![0.5, -0.5]));
        let y = x.mul(c).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
