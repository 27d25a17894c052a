//! Dense building blocks shared by encoders, readouts and potentials.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::params::{glorot_uniform, Bound, ParamStore};
use crate::tensor::Tensor;

/// `x · W + b` applied to each row of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            self.weight_name(),
            glorot_uniform(rng, self.fan_in, self.fan_out),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.fan_out]));
    }

    /// `x` is `[n, fan_in]`; returns `[n, fan_out]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        let w = b.get(&self.weight_name())?;
        let bias = b.get(&self.bias_name())?;
        let n = g.shape(x)[0];
        let xw = g.matmul(x, w)?;
        let bb = g.broadcast_rows(bias, n)?;
        Ok(g.add(xw, bb)?)
    }
}

/// Input projection, residual blocks `h + tanh(W · layer_norm(h) + b)`, and
/// a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResMlp {
    pub input: Linear,
    pub blocks: Vec<Linear>,
    pub output: Linear,
}

impl ResMlp {
    pub fn new(name: &str, fan_in: usize, hidden: usize, blocks: usize, fan_out: usize) -> Self {
        Self {
            input: Linear::new(format!("{name}.in"), fan_in, hidden),
            blocks: (0..blocks)
                .map(|i| Linear::new(format!("{name}.block{i}"), hidden, hidden))
                .collect(),
            output: Linear::new(format!("{name}.out"), hidden, fan_out),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.input.init(store, rng);
        for blk in &self.blocks {
            blk.init(store, rng);
        }
        self.output.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.input.forward(g, b, x)?;
        let h = residual_blocks(g, b, &self.blocks, h)?;
        self.output.forward(g, b, h)
    }
}

pub(crate) fn residual_blocks(
    g: &mut Graph,
    b: &Bound,
    blocks: &[Linear],
    mut h: NodeId,
) -> Result<NodeId> {
    for blk in blocks {
        let n = g.layer_norm(h)?;
        let a = blk.forward(g, b, n)?;
        let t = g.tanh(a);
        h = g.add(h, t)?;
    }
    Ok(h)
}

/// One hidden tanh layer: `[fan_in, hidden, fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            hidden: Linear::new(format!("{name}.hidden"), fan_in, hidden),
            output: Linear::new(format!("{name}.out"), hidden, fan_out),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.hidden.init(store, rng);
        self.output.init(store, rng);
    }

    /// `x` is a `[fan_in]` vector; returns `[fan_out]`.
    pub fn forward_vec(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        let row = g.reshape(x, &[1, self.hidden.fan_in])?;
        let h = self.hidden.forward(g, b, row)?;
        let h = g.tanh(h);
        let o = self.output.forward(g, b, h)?;
        Ok(g.reshape(o, &[self.output.fan_out])?)
    }
}
