//! Numeric and graph-valued adjoint propagation.

use super::ops::{argmax_mask, expand, reduce_sum, slice, stable_sigmoid};
use super::{Expand, Graph, GraphError, NodeId, Op, Reduce, Window};
use crate::tensor::Tensor;

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Inverse of a reduction, as an expansion back to `shape`.
fn unreduce(shape: &[usize], how: Reduce) -> Expand {
    match how {
        Reduce::All => Expand::Scalar(shape.to_vec()),
        Reduce::Axis0 => Expand::Axis0(shape[0]),
        Reduce::Axis1 => Expand::Axis1(shape[1]),
    }
}

/// Inverse of an expansion, as a reduction.
fn unexpand(how: &Expand) -> Reduce {
    match how {
        Expand::Scalar(_) => Reduce::All,
        Expand::Axis0(_) => Reduce::Axis0,
        Expand::Axis1(_) => Reduce::Axis1,
    }
}

/// Zeros placed around `g` along `axis` so the result has `full` extent.
fn pad(g: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(full);
    if full.len() == 1 {
        out.data_mut()[start..start + g.len()].copy_from_slice(g.data());
        return out;
    }
    let c = full[1];
    for i in 0..g.rows() {
        let src = g.row(i);
        let (r, c0) = if axis == 0 {
            (start + i, 0)
        } else {
            (i, start)
        };
        out.data_mut()[r * c + c0..r * c + c0 + src.len()].copy_from_slice(src);
    }
    out
}

impl Graph {
    fn check_root(&self, root: NodeId) -> Result<(), GraphError> {
        if self.value(root).len() != 1 {
            return Err(GraphError::NonScalarRoot(self.shape(root).to_vec()));
        }
        Ok(())
    }

    /// Numeric gradients of the scalar `root` with respect to each node in
    /// `wrt`. Nodes that `root` does not depend on get zeros.
    pub fn reverse_grad(&self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, GraphError> {
        self.check_root(root)?;
        let needed = self.dependents(wrt, root);
        let lo = wrt.iter().map(|w| w.0).min().unwrap_or(root.0).min(root.0);
        let mut adj: Window<Option<Tensor>> = Window::new(lo, root.0, None);
        adj[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (lo..=root.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if wrt.iter().any(|w| w.0 == i) {
                // Keep the adjoint for the caller, but still propagate through
                // non-leaf targets so deeper targets see every path.
                adj[i] = Some(g.clone());
            }
            self.vjp_numeric(NodeId(i), &g, &needed, &mut adj);
        }
        Ok(wrt
            .iter()
            .map(|w| {
                if w.0 <= root.0 {
                    adj[w.0].clone()
                } else {
                    None
                }
                .unwrap_or_else(|| Tensor::zeros(self.shape(*w)))
            })
            .collect())
    }

    fn vjp_numeric(
        &self,
        id: NodeId,
        g: &Tensor,
        needed: &Window<bool>,
        adj: &mut Window<Option<Tensor>>,
    ) {
        let node = &self.nodes[id.0];
        let out = &node.value;
        let v = |n: NodeId| &self.nodes[n.0].value;
        let mut push = |n: NodeId, t: Tensor| {
            if needed[n.0] {
                accumulate(&mut adj[n.0], t);
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach(_) | Op::Sign(_) | Op::StepGt(..) | Op::ArgMaxMask(..) => {}
            Op::Add(a, b) => {
                push(*a, g.clone());
                push(*b, g.clone());
            }
            Op::Sub(a, b) => {
                push(*a, g.clone());
                push(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if needed[a.0] {
                    push(*a, g.zip_map(v(*b), |x, y| x * y));
                }
                if needed[b.0] {
                    push(*b, g.zip_map(v(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if needed[a.0] {
                    push(*a, g.zip_map(v(*b), |x, y| x / y));
                }
                if needed[b.0] {
                    let t = g.zip_map(out, |x, o| x * o).zip_map(v(*b), |x, y| -x / y);
                    push(*b, t);
                }
            }
            Op::Neg(a) => push(*a, g.map(|x| -x)),
            Op::PowI(a, n) => {
                let n = *n;
                let d = v(*a).map(|x| {
                    if n == 0 {
                        0.0
                    } else {
                        n as f64 * x.powi(n - 1)
                    }
                });
                push(*a, g.zip_map(&d, |x, y| x * y));
            }
            Op::PowF(a, p) => {
                let p = *p;
                let d = v(*a).map(|x| p * x.powf(p - 1.0));
                push(*a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Exp(a) => push(*a, g.zip_map(out, |x, o| x * o)),
            Op::Log(a) => push(*a, g.zip_map(v(*a), |x, y| x / y)),
            Op::Tanh(a) => push(*a, g.zip_map(out, |x, o| x * (1.0 - o * o))),
            Op::Softplus(a) => push(*a, g.zip_map(v(*a), |x, y| x * stable_sigmoid(y))),
            Op::Sigmoid(a) => push(*a, g.zip_map(out, |x, o| x * o * (1.0 - o))),
            Op::Square(a) => push(*a, g.zip_map(v(*a), |x, y| 2.0 * x * y)),
            Op::Abs(a) => push(
                *a,
                g.zip_map(v(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::MaxConst(a, c) => {
                let c = *c;
                push(*a, g.zip_map(v(*a), |x, y| if y > c { x } else { 0.0 }))
            }
            Op::MatMul { a, b, ta, tb } => {
                let g2 = g;
                if needed[a.0] {
                    let da = if *ta {
                        Tensor::matmul(v(*b), g2, *tb, true)
                    } else {
                        Tensor::matmul(g2, v(*b), false, !*tb)
                    };
                    push(*a, da);
                }
                if needed[b.0] {
                    let db = if *tb {
                        Tensor::matmul(g2, v(*a), true, *ta)
                    } else {
                        Tensor::matmul(v(*a), g2, !*ta, false)
                    };
                    push(*b, db);
                }
            }
            Op::Affine { a, scale, .. } => {
                let s = *scale;
                push(*a, g.map(|x| x * s))
            }
            Op::Sum(a, how) => push(*a, expand(g, &unreduce(v(*a).shape(), *how))),
            Op::Mean(a, how) => {
                let shape = v(*a).shape();
                let n = match how {
                    Reduce::All => v(*a).len(),
                    Reduce::Axis0 => shape[0],
                    Reduce::Axis1 => shape[1],
                } as f64;
                push(*a, expand(&g.map(|x| x / n), &unreduce(shape, *how)));
            }
            Op::Max(a, how) => {
                let mask = argmax_mask(v(*a), *how);
                let spread = expand(g, &unreduce(v(*a).shape(), *how));
                push(*a, spread.zip_map(&mask, |x, m| x * m));
            }
            Op::LayerNorm(a) => {
                // dx = (g - mean(g) - y * mean(g * y)) / sigma, per row.
                let x = v(*a);
                let c = x.cols();
                let mut dx = Vec::with_capacity(x.len());
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let mean = row.iter().fold(0.0, |s, t| s + t) / c as f64;
                    let var = row.iter().fold(0.0, |s, t| s + (t - mean) * (t - mean)) / c as f64;
                    let inv = 1.0 / (var + super::ops::LAYER_NORM_EPS).sqrt();
                    let (gr, yr) = (g.row(i), out.row(i));
                    let gm = gr.iter().fold(0.0, |s, t| s + t) / c as f64;
                    let gym = gr.iter().zip(yr).fold(0.0, |s, (a, b)| s + a * b) / c as f64;
                    dx.extend(gr.iter().zip(yr).map(|(gi, yi)| inv * (gi - gm - yi * gym)));
                }
                push(*a, Tensor::new(x.shape(), dx));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = v(*p).shape()[if v(*p).rank() == 1 { 0 } else { *axis }];
                    if needed[p.0] {
                        push(*p, slice(g, *axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Slice { a, axis, start, .. } => push(*a, pad(g, v(*a).shape(), *axis, *start)),
            Op::Broadcast(a, how) => {
                let r = reduce_sum(g, unexpand(how));
                push(*a, r.reshaped(v(*a).shape()));
            }
            Op::Reshape(a, _) => push(*a, g.clone().reshaped(v(*a).shape())),
        }
    }

    /// Gradient of the scalar `root` with respect to `wrt`, built as new
    /// nodes of this graph. The returned node's value equals the numeric
    /// gradient, and it can itself be differentiated.
    pub fn grad_as_graph(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId, GraphError> {
        self.check_root(root)?;
        if wrt.0 > root.0 {
            return Ok(self.zeros(&self.shape(wrt).to_vec()));
        }
        let needed = self.dependents(&[wrt], root);
        let mut adj: Window<Option<NodeId>> = Window::new(wrt.0, root.0, None);
        let seed = self.leaf(Tensor::full(self.shape(root), 1.0));
        adj[root.0] = Some(seed);
        for i in (wrt.0 + 1..=root.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            self.vjp_graph(NodeId(i), g, &needed, &mut adj)?;
        }
        match adj[wrt.0] {
            Some(g) => Ok(g),
            None => Ok(self.zeros(&self.shape(wrt).to_vec())),
        }
    }

    fn vjp_graph(
        &mut self,
        id: NodeId,
        g: NodeId,
        needed: &Window<bool>,
        adj: &mut Window<Option<NodeId>>,
    ) -> Result<(), GraphError> {
        let op = self.nodes[id.0].op.clone();
        let mut contribs: Vec<(NodeId, NodeId)> = Vec::new();
        let need = |n: NodeId| needed[n.0];
        match op {
            Op::Leaf | Op::Detach(_) | Op::Sign(_) | Op::StepGt(..) | Op::ArgMaxMask(..) => {}
            Op::Add(a, b) => {
                contribs.push((a, g));
                contribs.push((b, g));
            }
            Op::Sub(a, b) => {
                contribs.push((a, g));
                if need(b) {
                    let ng = self.neg(g);
                    contribs.push((b, ng));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    contribs.push((a, self.mul(g, b)?));
                }
                if need(b) {
                    contribs.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    contribs.push((a, self.div(g, b)?));
                }
                if need(b) {
                    let go = self.mul(g, id)?;
                    let q = self.div(go, b)?;
                    contribs.push((b, self.neg(q)));
                }
            }
            Op::Neg(a) => contribs.push((a, self.neg(g))),
            Op::PowI(a, n) => {
                let d = if n == 0 {
                    let s = self.shape(a).to_vec();
                    self.zeros(&s)
                } else {
                    let p = self.powi(a, n - 1);
                    self.scale(p, n as f64)
                };
                contribs.push((a, self.mul(g, d)?));
            }
            Op::PowF(a, p) => {
                let q = self.powf(a, p - 1.0);
                let d = self.scale(q, p);
                contribs.push((a, self.mul(g, d)?));
            }
            Op::Exp(a) => contribs.push((a, self.mul(g, id)?)),
            Op::Log(a) => contribs.push((a, self.div(g, a)?)),
            Op::Tanh(a) => {
                let sq = self.square(id);
                let d = self.affine(sq, -1.0, 1.0);
                contribs.push((a, self.mul(g, d)?));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                contribs.push((a, self.mul(g, s)?));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.affine(id, -1.0, 1.0);
                let d = self.mul(id, one_minus)?;
                contribs.push((a, self.mul(g, d)?));
            }
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0);
                contribs.push((a, self.mul(g, two_a)?));
            }
            Op::Abs(a) => {
                let s = self.sign(a);
                contribs.push((a, self.mul(g, s)?));
            }
            Op::MaxConst(a, c) => {
                let m = self.step_gt(a, c);
                contribs.push((a, self.mul(g, m)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                if need(a) {
                    let da = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    contribs.push((a, da));
                }
                if need(b) {
                    let db = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    contribs.push((b, db));
                }
            }
            Op::Affine { a, scale, .. } => contribs.push((a, self.scale(g, scale))),
            Op::Sum(a, how) => {
                let shape = self.shape(a).to_vec();
                contribs.push((a, self.expand_node(g, unreduce(&shape, how))));
            }
            Op::Mean(a, how) => {
                let shape = self.shape(a).to_vec();
                let n = match how {
                    Reduce::All => shape.iter().product(),
                    Reduce::Axis0 => shape[0],
                    Reduce::Axis1 => shape[1],
                } as f64;
                let gs = self.scale(g, 1.0 / n);
                contribs.push((a, self.expand_node(gs, unreduce(&shape, how))));
            }
            Op::Max(a, how) => {
                let shape = self.shape(a).to_vec();
                let spread = self.expand_node(g, unreduce(&shape, how));
                let mask = self.argmax_mask(a, how);
                contribs.push((a, self.mul(spread, mask)?));
            }
            Op::LayerNorm(a) => contribs.push((a, self.layer_norm_vjp_graph(a, g)?)),
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let s = self.shape(p);
                    let len = s[if s.len() == 1 { 0 } else { axis }];
                    if need(p) {
                        contribs.push((p, self.slice(g, axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                let full = self.shape(a).to_vec();
                let ax = if full.len() == 1 { 0 } else { axis };
                let mut pieces = Vec::with_capacity(3);
                let zero_block = |graph: &mut Graph, extent: usize| {
                    let mut s = full.clone();
                    s[ax] = extent;
                    graph.zeros(&s)
                };
                if start > 0 {
                    pieces.push(zero_block(self, start));
                }
                pieces.push(g);
                let tail = full[ax] - start - len;
                if tail > 0 {
                    pieces.push(zero_block(self, tail));
                }
                let padded = if pieces.len() == 1 {
                    g
                } else {
                    self.concat(&pieces, ax)?
                };
                contribs.push((a, padded));
            }
            Op::Broadcast(a, how) => {
                let r = self.sum_axis(g, unexpand(&how))?;
                let shape = self.shape(a).to_vec();
                let r = if self.shape(r) == shape.as_slice() {
                    r
                } else {
                    self.reshape(r, &shape)?
                };
                contribs.push((a, r));
            }
            Op::Reshape(a, _) => {
                let shape = self.shape(a).to_vec();
                contribs.push((a, self.reshape(g, &shape)?));
            }
        }
        for (n, c) in contribs {
            if !need(n) {
                continue;
            }
            adj[n.0] = Some(match adj[n.0] {
                Some(prev) => self.add(prev, c)?,
                None => c,
            });
        }
        Ok(())
    }

    /// Layer-norm adjoint rebuilt from differentiable primitives so that its
    /// own derivative is available.
    fn layer_norm_vjp_graph(&mut self, x: NodeId, g: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(x).to_vec();
        let (reduce, spread) = if shape.len() == 2 {
            (Reduce::Axis1, Expand::Axis1(shape[1]))
        } else {
            (Reduce::All, Expand::Scalar(shape.clone()))
        };
        let mu = self.mean_axis(x, reduce)?;
        let mu_b = self.expand_node(mu, spread.clone());
        let xc = self.sub(x, mu_b)?;
        let sq = self.square(xc);
        let var = self.mean_axis(sq, reduce)?;
        let var_eps = self.add_const(var, super::ops::LAYER_NORM_EPS);
        let inv = self.powf(var_eps, -0.5);
        let inv_b = self.expand_node(inv, spread.clone());
        let y = self.mul(xc, inv_b)?;
        let gm = self.mean_axis(g, reduce)?;
        let gm_b = self.expand_node(gm, spread.clone());
        let gy = self.mul(g, y)?;
        let gym = self.mean_axis(gy, reduce)?;
        let gym_b = self.expand_node(gym, spread);
        let t = self.sub(g, gm_b)?;
        let yg = self.mul(y, gym_b)?;
        let t = self.sub(t, yg)?;
        self.mul(inv_b, t)
    }
}
