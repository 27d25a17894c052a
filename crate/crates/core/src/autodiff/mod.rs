//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is an append-only arena of nodes. Each node is created by a
//! primitive from nodes that already exist, so index order is a topological
//! order and the graph is acyclic by construction. Values are computed eagerly
//! when a node is created and can be recomputed after leaves change with
//! [`Graph::forward_eval`].
//!
//! Two backward passes are provided:
//!
//! * [`Graph::reverse_grad`] propagates numeric adjoints.
//! * [`Graph::grad_as_graph`] appends the adjoint computation to the graph
//!   itself, so the returned gradient is an ordinary node that can be
//!   differentiated again. This is how an outer loss is backpropagated through
//!   unrolled inner gradient steps.
//!
//! ```
//! use equiagg::autodiff::Graph;
//! use equiagg::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.square(x);
//! assert_eq!(g.value(y).item(), 9.0);
//! let dy = g.grad_as_graph(y, x).unwrap();
//! assert_eq!(g.value(dy).item(), 6.0);
//! let d2y = g.reverse_grad(dy, &[x]).unwrap();
//! assert_eq!(d2y[0].item(), 2.0);
//! ```

mod backward;
mod ops;

use thiserror::Error;

use crate::tensor::Tensor;

pub use ops::Reduce;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("gradient root must be scalar-shaped, got {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// How a lower-rank operand is replicated to a larger shape.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Expand {
    /// `[]` to any shape.
    Scalar(Vec<usize>),
    /// `[c]` to `[rows, c]`, repeating the vector as every row.
    Axis0(usize),
    /// `[r]` to `[r, cols]`, repeating the vector as every column.
    Axis1(usize),
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    PowI(NodeId, i32),
    PowF(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Abs(NodeId),
    MaxConst(NodeId, f64),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Affine {
        a: NodeId,
        scale: f64,
        shift: f64,
    },
    Sum(NodeId, Reduce),
    Mean(NodeId, Reduce),
    Max(NodeId, Reduce),
    LayerNorm(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Broadcast(NodeId, Expand),
    Reshape(NodeId, Vec<usize>),
    // Piecewise-constant helpers; their derivative is zero everywhere.
    Detach(NodeId),
    Sign(NodeId),
    StepGt(NodeId, f64),
    ArgMaxMask(NodeId, Reduce),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Div(..) => "divide",
            Op::Neg(..) => "negate",
            Op::PowI(..) => "powi",
            Op::PowF(..) => "powf",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::MaxConst(..) => "max_const",
            Op::MatMul { .. } => "matmul",
            Op::Affine { .. } => "affine",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::LayerNorm(..) => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Detach(..) => "detach",
            Op::Sign(..) => "sign",
            Op::StepGt(..) => "step_gt",
            Op::ArgMaxMask(..) => "argmax_mask",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Neg(a)
            | Op::PowI(a, _)
            | Op::PowF(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::MaxConst(a, _)
            | Op::Affine { a, .. }
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Max(a, _)
            | Op::LayerNorm(a)
            | Op::Slice { a, .. }
            | Op::Broadcast(a, _)
            | Op::Reshape(a, _)
            | Op::Detach(a)
            | Op::Sign(a)
            | Op::StepGt(a, _)
            | Op::ArgMaxMask(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Arena of differentiable nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.leaf(Tensor::zeros(shape))
    }

    /// Replaces the value of a leaf. Downstream values are stale until the
    /// next [`Graph::forward_eval`].
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<(), GraphError> {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Leaf), "set_leaf on a non-leaf node");
        if node.value.shape() != value.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "set_leaf",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf node up to and including `root` in index
    /// order and returns the root value.
    pub fn forward_eval(&mut self, root: NodeId) -> Result<&Tensor, GraphError> {
        for i in 0..=root.0 {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(&op)?;
            self.nodes[i].value = value;
        }
        Ok(&self.nodes[root.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Name of the primitive that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Flags nodes whose value depends on any of `sources`.
    fn dependents(&self, sources: &[NodeId], upto: NodeId) -> Window<bool> {
        let lo = sources
            .iter()
            .map(|s| s.0)
            .min()
            .unwrap_or(upto.0 + 1)
            .min(upto.0 + 1);
        let mut dep = Window::new(lo, upto.0, false);
        for s in sources {
            if s.0 <= upto.0 {
                dep[s.0] = true;
            }
        }
        for i in lo..=upto.0 {
            if !dep[i] && self.nodes[i].op.inputs().iter().any(|p| dep[p.0]) {
                dep[i] = true;
            }
        }
        dep
    }
}

/// Dense per-node storage for the id range `lo..=hi`. Reads outside the
/// range return the fill value, so a backward pass costs memory in the
/// span it visits rather than the whole graph.
pub(crate) struct Window<T> {
    lo: usize,
    items: Vec<T>,
    fill: T,
}

impl<T: Clone> Window<T> {
    pub(crate) fn new(lo: usize, hi: usize, fill: T) -> Self {
        let len = (hi + 1).saturating_sub(lo);
        Self {
            lo,
            items: vec![fill.clone(); len],
            fill,
        }
    }
}

impl<T> std::ops::Index<usize> for Window<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        match i.checked_sub(self.lo) {
            Some(k) if k < self.items.len() => &self.items[k],
            _ => &self.fill,
        }
    }
}

impl<T> std::ops::IndexMut<usize> for Window<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.items[i - self.lo]
    }
}

#[cfg(test)]
mod tests;
