//! Primitive constructors and their forward kernels.

use serde::{Deserialize, Serialize};

use super::{Expand, Graph, GraphError, NodeId, Op};
use crate::tensor::Tensor;

/// Layer-normalization variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Reduction extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduce {
    /// Every element, giving a scalar.
    All,
    /// Collapse the rows of a matrix: `[r, c]` to `[c]`.
    Axis0,
    /// Collapse the columns of a matrix: `[r, c]` to `[r]`.
    Axis1,
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reduce_count(shape: &[usize], how: Reduce) -> usize {
    match how {
        Reduce::All => shape.iter().product(),
        Reduce::Axis0 => shape[0],
        Reduce::Axis1 => shape[1],
    }
}

pub(crate) fn reduce_sum(t: &Tensor, how: Reduce) -> Tensor {
    match how {
        Reduce::All => Tensor::scalar(t.sum()),
        Reduce::Axis0 => {
            let c = t.cols();
            let mut out = vec![0.0; c];
            for i in 0..t.rows() {
                for (o, v) in out.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        }
        Reduce::Axis1 => Tensor::vector(
            (0..t.rows())
                .map(|i| t.row(i).iter().fold(0.0, |a, v| a + v))
                .collect(),
        ),
    }
}

/// Index of the first maximal element in each reduction group.
fn argmax_groups(t: &Tensor, how: Reduce) -> Vec<usize> {
    let first_max = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, v) in it {
            if best.0 == usize::MAX || v > best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    let d = t.data();
    match how {
        Reduce::All => vec![first_max(&mut d.iter().copied().enumerate())],
        Reduce::Axis0 => {
            let (r, c) = (t.rows(), t.cols());
            (0..c)
                .map(|j| first_max(&mut (0..r).map(|i| (i * c + j, d[i * c + j]))))
                .collect()
        }
        Reduce::Axis1 => {
            let c = t.cols();
            (0..t.rows())
                .map(|i| first_max(&mut (0..c).map(|j| (i * c + j, d[i * c + j]))))
                .collect()
        }
    }
}

pub(crate) fn argmax_mask(t: &Tensor, how: Reduce) -> Tensor {
    let mut mask = Tensor::zeros(t.shape());
    if t.is_empty() {
        return mask;
    }
    for idx in argmax_groups(t, how) {
        mask.data_mut()[idx] = 1.0;
    }
    mask
}

pub(crate) fn expand(t: &Tensor, how: &Expand) -> Tensor {
    match how {
        Expand::Scalar(shape) => Tensor::full(shape, t.item()),
        Expand::Axis0(rows) => {
            let c = t.len();
            let mut data = Vec::with_capacity(rows * c);
            for _ in 0..*rows {
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[*rows, c], data)
        }
        Expand::Axis1(cols) => {
            let r = t.len();
            let mut data = Vec::with_capacity(r * cols);
            for &v in t.data() {
                data.extend(std::iter::repeat_n(v, *cols));
            }
            Tensor::new(&[r, *cols], data)
        }
    }
}

/// Normalizes along the last axis (each row of a matrix, or the whole vector).
pub(crate) fn layer_norm(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.rows() {
        let row = t.row(i);
        let mean = row.iter().fold(0.0, |a, v| a + v) / c as f64;
        let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::new(t.shape(), out)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let rank = parts[0].rank();
    if rank == 1 || axis == 0 {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.data());
        }
        if rank == 1 {
            return Tensor::vector(data);
        }
        let rows = parts.iter().map(|p| p.rows()).sum::<usize>();
        return Tensor::new(&[rows, parts[0].cols()], data);
    }
    let rows = parts[0].rows();
    let cols = parts.iter().map(|p| p.cols()).sum::<usize>();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(&[rows, cols], data)
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    if t.rank() == 1 {
        return Tensor::vector(t.data()[start..start + len].to_vec());
    }
    let c = t.cols();
    if axis == 0 {
        return Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec());
    }
    let mut data = Vec::with_capacity(t.rows() * len);
    for i in 0..t.rows() {
        data.extend_from_slice(&t.row(i)[start..start + len]);
    }
    Tensor::new(&[t.rows(), len], data)
}

impl Graph {
    pub(crate) fn compute(&self, op: &Op) -> Result<Tensor, GraphError> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
            Op::Sub(a, b) => v(*a).zip_map(v(*b), |x, y| x - y),
            Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
            Op::Div(a, b) => v(*a).zip_map(v(*b), |x, y| x / y),
            Op::Neg(a) => v(*a).map(|x| -x),
            Op::PowI(a, n) => v(*a).map(|x| x.powi(*n)),
            Op::PowF(a, p) => v(*a).map(|x| x.powf(*p)),
            Op::Exp(a) => v(*a).map(f64::exp),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::Tanh(a) => v(*a).map(f64::tanh),
            Op::Softplus(a) => v(*a).map(stable_softplus),
            Op::Sigmoid(a) => v(*a).map(stable_sigmoid),
            Op::Square(a) => v(*a).map(|x| x * x),
            Op::Abs(a) => v(*a).map(f64::abs),
            Op::MaxConst(a, c) => v(*a).map(|x| x.max(*c)),
            Op::MatMul { a, b, ta, tb } => Tensor::matmul(v(*a), v(*b), *ta, *tb),
            Op::Affine { a, scale, shift } => v(*a).map(|x| scale * x + shift),
            Op::Sum(a, how) => reduce_sum(v(*a), *how),
            Op::Mean(a, how) => {
                let n = reduce_count(v(*a).shape(), *how) as f64;
                reduce_sum(v(*a), *how).map(|s| s / n)
            }
            Op::Max(a, how) => {
                let t = v(*a);
                let idx = argmax_groups(t, *how);
                let vals: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
                match how {
                    Reduce::All => Tensor::scalar(vals[0]),
                    _ => Tensor::vector(vals),
                }
            }
            Op::LayerNorm(a) => layer_norm(v(*a)),
            Op::Concat { parts, axis } => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| v(*p)).collect();
                concat(&ts, *axis)
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => slice(v(*a), *axis, *start, *len),
            Op::Broadcast(a, how) => expand(v(*a), how),
            Op::Reshape(a, shape) => v(*a).clone().reshaped(shape),
            Op::Detach(a) => v(*a).clone(),
            Op::Sign(a) => v(*a).map(sign),
            Op::StepGt(a, c) => v(*a).map(|x| if x > *c { 1.0 } else { 0.0 }),
            Op::ArgMaxMask(a, how) => argmax_mask(v(*a), *how),
        })
    }

    fn build(&mut self, op: Op) -> NodeId {
        let value = self
            .compute(&op)
            .expect("operands were validated before construction");
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn want_rank(
        &self,
        op: &'static str,
        a: NodeId,
        ok: bool,
        expected: &'static str,
    ) -> Result<(), GraphError> {
        if !ok {
            return Err(GraphError::BadShape {
                op,
                expected,
                got: self.shape(a).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("add", a, b)?;
        Ok(self.build(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("subtract", a, b)?;
        Ok(self.build(Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("multiply", a, b)?;
        Ok(self.build(Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("divide", a, b)?;
        Ok(self.build(Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Neg(a))
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        self.build(Op::PowI(a, n))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        self.build(Op::PowF(a, p))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Abs(a))
    }

    /// Elementwise `max(a, c)`.
    pub fn max_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.build(Op::MaxConst(a, c))
    }

    /// Elementwise `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        self.build(Op::Affine { a, scale, shift })
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.affine(a, s, 0.0)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.affine(a, 1.0, c)
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(
        &mut self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    ) -> Result<NodeId, GraphError> {
        self.want_rank("matmul", a, self.shape(a).len() == 2, "a matrix")?;
        self.want_rank("matmul", b, self.shape(b).len() == 2, "a matrix")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ka = if ta { sa[0] } else { sa[1] };
        let kb = if tb { sb[1] } else { sb[0] };
        if ka != kb {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(self.build(Op::MatMul { a, b, ta, tb }))
    }

    /// Matrix-vector product `[r, c] · [c] -> [r]`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, GraphError> {
        self.want_rank("matvec", v, self.shape(v).len() == 1, "a vector")?;
        let n = self.shape(v)[0];
        let col = self.reshape(v, &[n, 1])?;
        let out = self.matmul(m, col)?;
        let r = self.shape(out)[0];
        self.reshape(out, &[r])
    }

    fn check_reduce(&self, op: &'static str, a: NodeId, how: Reduce) -> Result<(), GraphError> {
        let ok = match how {
            Reduce::All => true,
            Reduce::Axis0 | Reduce::Axis1 => self.shape(a).len() == 2,
        };
        self.want_rank(op, a, ok, "a matrix for an axis reduction")
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Sum(a, Reduce::All))
    }

    pub fn sum_axis(&mut self, a: NodeId, how: Reduce) -> Result<NodeId, GraphError> {
        self.check_reduce("sum", a, how)?;
        Ok(self.build(Op::Sum(a, how)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.mean_axis(a, Reduce::All)
    }

    pub fn mean_axis(&mut self, a: NodeId, how: Reduce) -> Result<NodeId, GraphError> {
        self.check_reduce("mean", a, how)?;
        self.want_rank(
            "mean",
            a,
            reduce_count(self.shape(a), how) > 0,
            "a non-empty reduction",
        )?;
        Ok(self.build(Op::Mean(a, how)))
    }

    pub fn max(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.max_axis(a, Reduce::All)
    }

    /// Maximum reduction; the adjoint flows to the first maximal index.
    pub fn max_axis(&mut self, a: NodeId, how: Reduce) -> Result<NodeId, GraphError> {
        self.check_reduce("max", a, how)?;
        self.want_rank(
            "max",
            a,
            reduce_count(self.shape(a), how) > 0,
            "a non-empty reduction",
        )?;
        Ok(self.build(Op::Max(a, how)))
    }

    /// Normalizes along the last axis with `ε = 1e-5` added to the variance.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(a);
        self.want_rank(
            "layer_norm",
            a,
            !s.is_empty() && s[s.len() - 1] > 0,
            "a non-empty vector or matrix",
        )?;
        Ok(self.build(Op::LayerNorm(a)))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        self.want_rank(
            "concat",
            parts[0],
            !first.is_empty() && axis < first.len(),
            "a vector or matrix with a valid axis",
        )?;
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && (0..s.len()).all(|d| d == axis || s[d] == first[d]);
            if !compatible {
                return Err(GraphError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        Ok(self.build(Op::Concat {
            parts: parts.to_vec(),
            axis,
        }))
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, GraphError> {
        let s = self.shape(a);
        self.want_rank(
            "slice",
            a,
            axis < s.len() && start + len <= s[axis],
            "a range within the sliced axis",
        )?;
        Ok(self.build(Op::Slice {
            a,
            axis,
            start,
            len,
        }))
    }

    /// Replicates a scalar to `shape`.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.want_rank("broadcast", a, self.shape(a).is_empty(), "a scalar")?;
        Ok(self.build(Op::Broadcast(a, Expand::Scalar(shape.to_vec()))))
    }

    /// Repeats a `[c]` vector as each row of a `[rows, c]` matrix.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId, GraphError> {
        self.want_rank("broadcast", a, self.shape(a).len() == 1, "a vector")?;
        Ok(self.build(Op::Broadcast(a, Expand::Axis0(rows))))
    }

    /// Repeats an `[r]` vector as each column of an `[r, cols]` matrix.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId, GraphError> {
        self.want_rank("broadcast", a, self.shape(a).len() == 1, "a vector")?;
        Ok(self.build(Op::Broadcast(a, Expand::Axis1(cols))))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        if shape.len() > 2 || shape.iter().product::<usize>() != self.value(a).len() {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.build(Op::Reshape(a, shape.to_vec())))
    }

    /// Same value, zero derivative.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Detach(a))
    }

    /// `s · a` for a scalar node `s`.
    pub fn mul_scalar(&mut self, s: NodeId, a: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return self.mul(s, a);
        }
        let sb = self.broadcast_scalar(s, &shape)?;
        self.mul(sb, a)
    }

    /// Squared L2 norm as a scalar node.
    pub fn norm_sq(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        self.sum(sq)
    }

    pub(crate) fn sign(&mut self, a: NodeId) -> NodeId {
        self.build(Op::Sign(a))
    }

    pub(crate) fn step_gt(&mut self, a: NodeId, c: f64) -> NodeId {
        self.build(Op::StepGt(a, c))
    }

    pub(crate) fn argmax_mask(&mut self, a: NodeId, how: Reduce) -> NodeId {
        self.build(Op::ArgMaxMask(a, how))
    }

    pub(crate) fn expand_node(&mut self, a: NodeId, how: Expand) -> NodeId {
        self.build(Op::Broadcast(a, how))
    }
}
