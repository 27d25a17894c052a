//! Permutation-invariant aggregators: Equilibrium Aggregation and the
//! pooling baselines it is compared against.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Reduce};
use crate::error::{Error, Result};
use crate::inner::{
    convergence_stats, minimize_energy, AuxEnergy, ConvergenceStats, EnergyState, InnerOptConfig,
    SetEnergy,
};
use crate::layers::Linear;
use crate::params::{Bound, ParamStore};
use crate::potentials::{PotentialSpec, Regularizer};
use crate::tensor::Tensor;

/// Floor applied to `y_s` before dividing it out.
pub const RATIO_FLOOR: f64 = 1e-8;

/// Added to the PNA variance before the square root.
pub const PNA_STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregatorKind {
    Equilibrium,
    Sum,
    Mean,
    Max,
    MultiHeadAttention,
    Pna,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Equilibrium => "equilibrium",
            AggregatorKind::Sum => "sum",
            AggregatorKind::Mean => "mean",
            AggregatorKind::Max => "max",
            AggregatorKind::MultiHeadAttention => "attention",
            AggregatorKind::Pna => "pna",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "equilibrium" | "ea" => AggregatorKind::Equilibrium,
            "sum" => AggregatorKind::Sum,
            "mean" => AggregatorKind::Mean,
            "max" => AggregatorKind::Max,
            "attention" | "mha" => AggregatorKind::MultiHeadAttention,
            "pna" => AggregatorKind::Pna,
            other => return Err(Error::Config(format!("unknown aggregator `{other}`"))),
        })
    }
}

/// Map applied to the minimizer before it is returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputTransform {
    Identity,
    /// `[y_r, y_s] ↦ y_r / max(y_s, 1e-8)`.
    AttentionRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSpec {
    pub potential: PotentialSpec,
    pub regularizer: Regularizer,
    pub inner: InnerOptConfig,
    pub output: OutputTransform,
}

/// Learned-query attention pooling with `heads` heads of width
/// `output_dim / heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhaSpec {
    pub name: String,
    pub input_dim: usize,
    pub output_dim: usize,
    pub heads: usize,
    key: Linear,
    value: Linear,
}

impl MhaSpec {
    pub fn new(name: &str, input_dim: usize, output_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || output_dim % heads != 0 {
            return Err(Error::Structure(format!(
                "attention width {output_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            input_dim,
            output_dim,
            heads,
            key: Linear::new(format!("{name}.key"), input_dim, output_dim),
            value: Linear::new(format!("{name}.value"), input_dim, output_dim),
        })
    }

    pub fn query_name(&self) -> String {
        format!("{}.query", self.name)
    }

    pub fn head_dim(&self) -> usize {
        self.output_dim / self.heads
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.key.init(store, rng);
        self.value.init(store, rng);
        let limit = (3.0 / self.head_dim() as f64).sqrt();
        let q = (0..self.output_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        store.insert(self.query_name(), Tensor::vector(q));
    }

    /// `[output_dim, heads]` indicator of which head owns each coordinate.
    fn head_indicator(&self) -> Tensor {
        let dk = self.head_dim();
        let mut t = Tensor::zeros(&[self.output_dim, self.heads]);
        for j in 0..self.output_dim {
            t.data_mut()[j * self.heads + j / dk] = 1.0;
        }
        t
    }

    fn forward(&self, g: &mut Graph, b: &Bound, xs: NodeId) -> Result<NodeId> {
        let n = g.shape(xs)[0];
        let k = self.key.forward(g, b, xs)?;
        let v = self.value.forward(g, b, xs)?;
        let q = b.get(&self.query_name())?;
        let qb = g.broadcast_rows(q, n)?;
        let kq = g.mul(k, qb)?;
        let ind = g.leaf(self.head_indicator());
        let scores = g.matmul(kq, ind)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim() as f64).sqrt());
        // Softmax over the set, per head.
        let top = g.max_axis(scores, Reduce::Axis0)?;
        let top = g.detach(top);
        let top = g.broadcast_rows(top, n)?;
        let shifted = g.sub(scores, top)?;
        let w = g.exp(shifted);
        let z = g.sum_axis(w, Reduce::Axis0)?;
        let z = g.broadcast_rows(z, n)?;
        let w = g.div(w, z)?;
        let w_full = g.matmul_t(w, ind, false, true)?;
        let wv = g.mul(w_full, v)?;
        Ok(g.sum_axis(wv, Reduce::Axis0)?)
    }
}

/// `{mean, max, min, std} × {1, log(N+1), 1/log(N+1)}` followed by a linear
/// map to `output_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnaSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    mix: Linear,
}

impl PnaSpec {
    pub fn new(name: &str, input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            mix: Linear::new(format!("{name}.mix"), 12 * input_dim, output_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.mix.init(store, rng);
    }

    fn forward(&self, g: &mut Graph, b: &Bound, xs: NodeId) -> Result<NodeId> {
        let n = g.shape(xs)[0];
        let mean = g.mean_axis(xs, Reduce::Axis0)?;
        let max = g.max_axis(xs, Reduce::Axis0)?;
        let neg = g.neg(xs);
        let negmax = g.max_axis(neg, Reduce::Axis0)?;
        let min = g.neg(negmax);
        let mb = g.broadcast_rows(mean, n)?;
        let c = g.sub(xs, mb)?;
        let c2 = g.square(c);
        let var = g.mean_axis(c2, Reduce::Axis0)?;
        let var = g.add_const(var, PNA_STD_EPS);
        let std = g.powf(var, 0.5);
        let pooled = g.concat(&[mean, max, min, std], 0)?;
        let amp = (n as f64 + 1.0).ln();
        let up = g.scale(pooled, amp);
        let down = g.scale(pooled, 1.0 / amp);
        let all = g.concat(&[pooled, up, down], 0)?;
        let row = g.reshape(all, &[1, 12 * self.input_dim])?;
        let out = self.mix.forward(g, b, row)?;
        Ok(g.reshape(out, &[self.output_dim])?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AggregatorSpec {
    Equilibrium(EquilibriumSpec),
    Sum,
    Mean,
    Max,
    MultiHeadAttention(MhaSpec),
    Pna(PnaSpec),
}

/// Result of aggregating one set.
#[derive(Debug, Clone)]
pub struct Aggregated {
    pub output: NodeId,
    /// The input set was empty and `output` is the zero vector.
    pub empty: bool,
    /// Inner-loop nodes for Equilibrium Aggregation.
    pub state: Option<EnergyState>,
}

impl AggregatorSpec {
    pub fn kind(&self) -> AggregatorKind {
        match self {
            AggregatorSpec::Equilibrium(_) => AggregatorKind::Equilibrium,
            AggregatorSpec::Sum => AggregatorKind::Sum,
            AggregatorSpec::Mean => AggregatorKind::Mean,
            AggregatorSpec::Max => AggregatorKind::Max,
            AggregatorSpec::MultiHeadAttention(_) => AggregatorKind::MultiHeadAttention,
            AggregatorSpec::Pna(_) => AggregatorKind::Pna,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            AggregatorSpec::Equilibrium(e) => {
                let m = e.potential.latent_dim(input_dim);
                match e.output {
                    OutputTransform::Identity => m,
                    OutputTransform::AttentionRatio => m - 1,
                }
            }
            AggregatorSpec::Sum | AggregatorSpec::Mean | AggregatorSpec::Max => input_dim,
            AggregatorSpec::MultiHeadAttention(s) => s.output_dim,
            AggregatorSpec::Pna(s) => s.output_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            AggregatorSpec::Equilibrium(e) => {
                e.potential.init(store, rng);
                e.regularizer.init(store);
                e.inner.init(store);
            }
            AggregatorSpec::MultiHeadAttention(s) => s.init(store, rng),
            AggregatorSpec::Pna(s) => s.init(store, rng),
            AggregatorSpec::Sum | AggregatorSpec::Mean | AggregatorSpec::Max => {}
        }
    }
}

/// Aggregates the rows of `xs` (`[N, d_x]`) into one vector.
pub fn aggregate(
    g: &mut Graph,
    b: &Bound,
    spec: &AggregatorSpec,
    xs: NodeId,
) -> Result<Aggregated> {
    Ok(aggregate_impl(g, b, spec, xs, false)?.0)
}

/// [`aggregate`] plus inner-loop diagnostics for Equilibrium Aggregation.
pub fn aggregate_diagnosed(
    g: &mut Graph,
    b: &Bound,
    spec: &AggregatorSpec,
    xs: NodeId,
) -> Result<(Aggregated, Option<ConvergenceStats>)> {
    aggregate_impl(g, b, spec, xs, true)
}

fn aggregate_impl(
    g: &mut Graph,
    b: &Bound,
    spec: &AggregatorSpec,
    xs: NodeId,
    diagnose: bool,
) -> Result<(Aggregated, Option<ConvergenceStats>)> {
    let (n, d) = match g.shape(xs) {
        [n, d] => (*n, *d),
        s => return Err(Error::Structure(format!("set must be [N, d], got {s:?}"))),
    };
    match spec {
        AggregatorSpec::MultiHeadAttention(s) if s.input_dim != d => {
            return Err(Error::Structure(format!(
                "attention expects inputs of width {}, got {d}",
                s.input_dim
            )))
        }
        AggregatorSpec::Pna(s) if s.input_dim != d => {
            return Err(Error::Structure(format!(
                "PNA expects inputs of width {}, got {d}",
                s.input_dim
            )))
        }
        _ => {}
    }
    let out_dim = spec.output_dim(d);
    if n == 0 {
        let output = g.zeros(&[out_dim]);
        let (state, stats) = match spec {
            AggregatorSpec::Equilibrium(e) => {
                let st = EnergyState::empty(g, e.potential.latent_dim(d));
                let stats = diagnose.then(|| ConvergenceStats {
                    final_grad_maxnorm: 0.0,
                    aux_value: 0.0,
                    energy_trajectory: Vec::new(),
                });
                (Some(st), stats)
            }
            _ => (None, None),
        };
        let agg = Aggregated {
            output,
            empty: !matches!(spec, AggregatorSpec::Sum),
            state,
        };
        return Ok((agg, stats));
    }
    let mut stats = None;
    let (output, state) = match spec {
        AggregatorSpec::Sum => (g.sum_axis(xs, Reduce::Axis0)?, None),
        AggregatorSpec::Mean => (g.mean_axis(xs, Reduce::Axis0)?, None),
        AggregatorSpec::Max => (g.max_axis(xs, Reduce::Axis0)?, None),
        AggregatorSpec::MultiHeadAttention(s) => (s.forward(g, b, xs)?, None),
        AggregatorSpec::Pna(s) => (s.forward(g, b, xs)?, None),
        AggregatorSpec::Equilibrium(e) => {
            let m = e.potential.latent_dim(d);
            let energy = SetEnergy::new(g, b, &e.potential, &e.regularizer, xs)?;
            let mut state = minimize_energy(g, b, &e.inner, m, |g, y| energy.eval(g, b, y))?;
            if e.inner.aux_energy == AuxEnergy::Raw {
                state.use_raw_energy(n);
            }
            if diagnose {
                stats = Some(convergence_stats(g, &state, |g, y| energy.eval(g, b, y))?);
            }
            let y = state.output();
            let out = match e.output {
                OutputTransform::Identity => y,
                OutputTransform::AttentionRatio => attention_ratio(g, y)?,
            };
            (out, Some(state))
        }
    };
    let agg = Aggregated {
        output,
        empty: false,
        state,
    };
    Ok((agg, stats))
}

fn attention_ratio(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let m = g.shape(y)[0];
    let yr = g.slice(y, 0, 0, m - 1)?;
    let ys = g.slice(y, 0, m - 1, 1)?;
    let ys = g.max_const(ys, RATIO_FLOOR);
    let ys = g.reshape(ys, &[])?;
    let ys = g.broadcast_scalar(ys, &[m - 1])?;
    Ok(g.div(yr, ys)?)
}

/// Aggregates a set given as a plain tensor on a fresh graph.
pub fn aggregate_values(store: &ParamStore, spec: &AggregatorSpec, xs: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let x = g.leaf(xs.clone());
    let out = aggregate(&mut g, &b, spec, x)?;
    Ok(g.value(out.output).clone())
}

/// Largest L∞ deviation from the given-order result over `trials` random
/// reorderings of the rows of `xs`.
pub fn check_permutation_invariance<R: Rng + ?Sized>(
    store: &ParamStore,
    spec: &AggregatorSpec,
    xs: &Tensor,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let base = aggregate_values(store, spec, xs)?;
    let n = xs.rows();
    if n < 2 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        order.shuffle(rng);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| xs.row(i).to_vec()).collect();
        let out = aggregate_values(store, spec, &Tensor::from_rows(&rows))?;
        for (a, c) in base.data().iter().zip(out.data()) {
            worst = worst.max((a - c).abs());
        }
    }
    Ok(worst)
}
