//! Potential functions `F(x, y)` scoring the disagreement between a set
//! element `x` and a candidate aggregate `y`, and the regularizer `R(y)`.
//!
//! Every potential is evaluated for a whole set at once: `xs` is an
//! `[N, d_x]` node and the result is the `[N]` vector of per-element values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Reduce};
use crate::error::{Error, Result};
use crate::layers::{residual_blocks, Linear};
use crate::params::{glorot_uniform, Bound, ParamStore};
use crate::tensor::Tensor;

/// Learnable potential: the input projection of `[x, y]`, residual
/// tanh/layer-norm blocks, and a width-`K` output whose squares are summed,
/// so `F >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralPotential {
    pub name: String,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub squares: usize,
    input_x: Linear,
    blocks: Vec<Linear>,
    output: Linear,
}

impl NeuralPotential {
    pub fn new(
        name: &str,
        input_dim: usize,
        latent_dim: usize,
        hidden: usize,
        squares: usize,
    ) -> Self {
        Self::with_blocks(name, input_dim, latent_dim, hidden, squares, 2)
    }

    pub fn with_blocks(
        name: &str,
        input_dim: usize,
        latent_dim: usize,
        hidden: usize,
        squares: usize,
        blocks: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            input_dim,
            latent_dim,
            hidden,
            squares,
            input_x: Linear::new(format!("{name}.in"), input_dim, hidden),
            blocks: (0..blocks)
                .map(|i| Linear::new(format!("{name}.block{i}"), hidden, hidden))
                .collect(),
            output: Linear::new(format!("{name}.out"), hidden, squares),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Weight applied to `y` in the input projection.
    pub fn latent_weight_name(&self) -> String {
        format!("{}.in.wy", self.name)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        // The input projection acts on the concatenation [x, y]; draw it as
        // one matrix and split it into the x rows and the y rows.
        let fan_in = self.input_dim + self.latent_dim;
        let full = glorot_uniform(rng, fan_in, self.hidden);
        let split = self.input_dim * self.hidden;
        let data = full.into_data();
        store.insert(
            self.input_x.weight_name(),
            Tensor::new(&[self.input_dim, self.hidden], data[..split].to_vec()),
        );
        store.insert(
            self.latent_weight_name(),
            Tensor::new(&[self.latent_dim, self.hidden], data[split..].to_vec()),
        );
        store.insert(self.input_x.bias_name(), Tensor::zeros(&[self.hidden]));
        for blk in &self.blocks {
            blk.init(store, rng);
        }
        self.output.init(store, rng);
    }

    /// The `y`-independent part of the input projection, `xs · W_x`.
    pub fn project_inputs(&self, g: &mut Graph, b: &Bound, xs: NodeId) -> Result<NodeId> {
        check_cols(g, xs, self.input_dim, "neural potential input")?;
        let wx = b.get(&self.input_x.weight_name())?;
        Ok(g.matmul(xs, wx)?)
    }

    /// Per-element potentials given the projected inputs.
    pub fn terms_projected(
        &self,
        g: &mut Graph,
        b: &Bound,
        xproj: NodeId,
        y: NodeId,
    ) -> Result<NodeId> {
        check_vec(g, y, self.latent_dim, "neural potential latent")?;
        let n = g.shape(xproj)[0];
        let wy = b.get(&self.latent_weight_name())?;
        let bias = b.get(&self.input_x.bias_name())?;
        let yrow = g.reshape(y, &[1, self.latent_dim])?;
        let yw = g.matmul(yrow, wy)?;
        let yw = g.reshape(yw, &[self.hidden])?;
        let shift = g.add(yw, bias)?;
        let shift = g.broadcast_rows(shift, n)?;
        let h = g.add(xproj, shift)?;
        let h = residual_blocks(g, b, &self.blocks, h)?;
        let out = self.output.forward(g, b, h)?;
        let sq = g.square(out);
        Ok(g.sum_axis(sq, Reduce::Axis1)?)
    }

    pub fn terms(&self, g: &mut Graph, b: &Bound, xs: NodeId, y: NodeId) -> Result<NodeId> {
        let xp = self.project_inputs(g, b, xs)?;
        self.terms_projected(g, b, xp, y)
    }
}

/// `F_θ(x, y)` for a single element `x` (`[d_x]`) and latent `y` (`[M]`).
pub fn neural_potential(
    pot: &NeuralPotential,
    g: &mut Graph,
    b: &Bound,
    x: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    check_vec(g, x, pot.input_dim, "neural potential input")?;
    let xs = g.reshape(x, &[1, pot.input_dim])?;
    let t = pot.terms(g, b, xs, y)?;
    Ok(g.sum(t))
}

/// Closed-form potentials whose minimizers are the classical poolings.
/// Applied coordinate-wise and summed over coordinates for vector inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClosedFormKind {
    /// `(x - y)^2`
    Mean,
    /// `|x - y|`
    Median,
    /// `max(0, x - y)`
    Max,
    /// `-x y`, paired with the regularizer `y^2 / 2`.
    Sum,
}

impl ClosedFormKind {
    pub const ALL: [ClosedFormKind; 4] = [
        ClosedFormKind::Mean,
        ClosedFormKind::Median,
        ClosedFormKind::Max,
        ClosedFormKind::Sum,
    ];

    pub fn terms(self, g: &mut Graph, xs: NodeId, y: NodeId) -> Result<NodeId> {
        let d = g.shape(xs).get(1).copied().unwrap_or(0);
        check_vec(g, y, d, "closed-form latent")?;
        let n = g.shape(xs)[0];
        let yb = g.broadcast_rows(y, n)?;
        let per_coord = match self {
            ClosedFormKind::Mean => {
                let diff = g.sub(xs, yb)?;
                g.square(diff)
            }
            ClosedFormKind::Median => {
                let diff = g.sub(xs, yb)?;
                g.abs(diff)
            }
            ClosedFormKind::Max => {
                let diff = g.sub(xs, yb)?;
                g.max_const(diff, 0.0)
            }
            ClosedFormKind::Sum => {
                let prod = g.mul(xs, yb)?;
                g.neg(prod)
            }
        };
        Ok(g.sum_axis(per_coord, Reduce::Axis1)?)
    }

    /// Analytic aggregate of a scalar multiset.
    pub fn analytic(self, xs: &[f64]) -> f64 {
        match self {
            ClosedFormKind::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
            ClosedFormKind::Median => {
                let (lo, hi) = median_interval(xs);
                0.5 * (lo + hi)
            }
            ClosedFormKind::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ClosedFormKind::Sum => xs.iter().sum(),
        }
    }
}

/// Set of minimizers of `Σ |xᵢ - y|`: the middle order statistic for odd
/// `N`, the closed interval between the two middle ones for even `N`.
pub fn median_interval(xs: &[f64]) -> (f64, f64) {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    (s[(n - 1) / 2], s[n / 2])
}

/// Scalar closed-form potential `F(x, y)`.
pub fn closed_form_potential(
    kind: ClosedFormKind,
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    let xs = g.reshape(x, &[1, 1])?;
    let yv = g.reshape(y, &[1])?;
    let t = kind.terms(g, xs, yv)?;
    Ok(g.sum(t))
}

/// `exp(hᵀx) ‖x - y_r‖² + (y_s - exp(hᵀx))²` with `y = [y_r, y_s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPotential {
    pub query: Tensor,
}

impl AttentionPotential {
    pub fn new(query: Vec<f64>) -> Self {
        Self {
            query: Tensor::vector(query),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn terms(&self, g: &mut Graph, xs: NodeId, y: NodeId) -> Result<NodeId> {
        let d = self.dim();
        check_cols(g, xs, d, "attention potential input")?;
        check_vec(g, y, d + 1, "attention potential latent")?;
        let n = g.shape(xs)[0];
        let h = g.leaf(self.query.clone().reshaped(&[d, 1]));
        let scores = g.matmul(xs, h)?;
        let scores = g.reshape(scores, &[n])?;
        let w = g.exp(scores);
        let yr = g.slice(y, 0, 0, d)?;
        let ys = g.slice(y, 0, d, 1)?;
        let ys = g.reshape(ys, &[])?;
        let yrb = g.broadcast_rows(yr, n)?;
        let diff = g.sub(xs, yrb)?;
        let sq = g.square(diff);
        let dist = g.sum_axis(sq, Reduce::Axis1)?;
        let t1 = g.mul(w, dist)?;
        let ysb = g.broadcast_scalar(ys, &[n])?;
        let r = g.sub(ysb, w)?;
        let t2 = g.square(r);
        Ok(g.add(t1, t2)?)
    }

    /// Exact unregularized minimizer: `y_r = Σ wᵢ xᵢ / Σ wᵢ`, `y_s = mean(wᵢ)`
    /// with `wᵢ = exp(hᵀxᵢ)`. `y_r` is therefore already the softmax attention.
    pub fn exact_minimizer(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        let d = self.dim();
        let n = xs.len() as f64;
        let mut yr = vec![0.0; d];
        let mut ys = 0.0;
        for x in xs {
            let w = dot(self.query.data(), x).exp();
            for (acc, v) in yr.iter_mut().zip(x) {
                *acc += w * v;
            }
            ys += w;
        }
        let mut y: Vec<f64> = yr.into_iter().map(|v| v / ys).collect();
        y.push(ys / n);
        y
    }
}

/// `attention_potential(h, x, y)` for a single element.
pub fn attention_potential(h: &[f64], g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    let pot = AttentionPotential::new(h.to_vec());
    check_vec(g, x, pot.dim(), "attention potential input")?;
    let xs = g.reshape(x, &[1, pot.dim()])?;
    let t = pot.terms(g, xs, y)?;
    Ok(g.sum(t))
}

/// Single-query softmax attention `Σᵢ softmax(hᵀx)ᵢ xᵢ`, computed directly.
pub fn softmax_attention(h: &[f64], xs: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = xs.iter().map(|x| dot(h, x)).collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; h.len()];
    for (x, wi) in xs.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(x) {
            *o += wi / z * v;
        }
    }
    out
}

/// `Σₖ (yₖ / N - xᵏ)²` over `k = 1..=N` for scalar `x ∈ [0, 1]`. Its set
/// energy is minimized by the power sums `yₖ = Σᵢ xᵢᵏ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerSumPotential {
    pub n: usize,
}

impl PowerSumPotential {
    pub fn terms(&self, g: &mut Graph, xs: NodeId, y: NodeId) -> Result<NodeId> {
        check_cols(g, xs, 1, "power-sum input")?;
        check_vec(g, y, self.n, "power-sum latent")?;
        let rows = g.shape(xs)[0];
        let mut powers = Vec::with_capacity(rows * self.n);
        for &x in g.value(xs).data() {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Domain(format!(
                    "power-sum input {x} is outside [0, 1]"
                )));
            }
            let mut p = 1.0;
            for _ in 0..self.n {
                p *= x;
                powers.push(p);
            }
        }
        let pw = g.leaf(Tensor::new(&[rows, self.n], powers));
        let ys = g.scale(y, 1.0 / self.n as f64);
        let yb = g.broadcast_rows(ys, rows)?;
        let diff = g.sub(yb, pw)?;
        let sq = g.square(diff);
        Ok(g.sum_axis(sq, Reduce::Axis1)?)
    }
}

/// Single-element power-sum potential.
pub fn power_sum_potential(g: &mut Graph, x: f64, y: NodeId) -> Result<NodeId> {
    let n = match g.shape(y) {
        [n] if *n >= 1 => *n,
        s => {
            return Err(Error::Structure(format!(
                "power-sum latent must be a non-empty vector, got {s:?}"
            )))
        }
    };
    let xs = g.leaf(Tensor::new(&[1, 1], vec![x]));
    let t = PowerSumPotential { n }.terms(g, xs, y)?;
    Ok(g.sum(t))
}

/// Negative Gaussian log-likelihood `‖x - y‖² / (2σ²)` without its constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMapPotential {
    sigma: f64,
}

impl GaussianMapPotential {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn terms(&self, g: &mut Graph, xs: NodeId, y: NodeId) -> Result<NodeId> {
        let d = g.shape(xs).get(1).copied().unwrap_or(0);
        check_vec(g, y, d, "gaussian latent")?;
        let n = g.shape(xs)[0];
        let yb = g.broadcast_rows(y, n)?;
        let diff = g.sub(xs, yb)?;
        let sq = g.square(diff);
        let s = g.sum_axis(sq, Reduce::Axis1)?;
        Ok(g.scale(s, 1.0 / (2.0 * self.sigma * self.sigma)))
    }

    /// Conjugate posterior mean under the prior `N(0, σ₀²)`.
    pub fn posterior_mean(&self, xs: &[Vec<f64>], prior_sigma: f64) -> Vec<f64> {
        let d = xs.first().map_or(0, Vec::len);
        let s2 = self.sigma * self.sigma;
        let prec = 1.0 / (prior_sigma * prior_sigma) + xs.len() as f64 / s2;
        (0..d)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / s2 / prec)
            .collect()
    }

    /// Regularizer weight realizing the prior `N(0, σ₀²)`.
    pub fn prior_weight(prior_sigma: f64) -> f64 {
        1.0 / (2.0 * prior_sigma * prior_sigma)
    }
}

/// Single-element Gaussian MAP potential.
pub fn gaussian_map_potential(g: &mut Graph, x: NodeId, y: NodeId, sigma: f64) -> Result<NodeId> {
    let pot = GaussianMapPotential::new(sigma)?;
    let d = g.value(x).len();
    let xs = g.reshape(x, &[1, d])?;
    let t = pot.terms(g, xs, y)?;
    Ok(g.sum(t))
}

/// `R(y) = w ‖y‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Regularizer {
    None,
    /// Constant weight `w`.
    Fixed(f64),
    /// `w = softplus(λ)` with `λ` a named scalar parameter.
    Softplus {
        param: String,
    },
}

impl Regularizer {
    pub fn learned(param: impl Into<String>) -> Self {
        Regularizer::Softplus {
            param: param.into(),
        }
    }

    /// Registers `λ = 0` for learned regularizers.
    pub fn init(&self, store: &mut ParamStore) {
        if let Regularizer::Softplus { param } = self {
            store.insert(param.clone(), Tensor::scalar(0.0));
        }
    }

    pub fn value(&self, g: &mut Graph, b: &Bound, y: NodeId) -> Result<Option<NodeId>> {
        Ok(match self {
            Regularizer::None => None,
            Regularizer::Fixed(w) => {
                let n = g.norm_sq(y);
                Some(g.scale(n, *w))
            }
            Regularizer::Softplus { param } => {
                let lambda = b.get(param)?;
                let w = g.softplus(lambda);
                let n = g.norm_sq(y);
                Some(g.mul(w, n)?)
            }
        })
    }
}

/// Any potential usable inside equilibrium aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PotentialSpec {
    Neural(NeuralPotential),
    ClosedForm(ClosedFormKind),
    Attention(AttentionPotential),
    PowerSum(PowerSumPotential),
    GaussianMap(GaussianMapPotential),
}

/// Inputs with any `y`-independent work already done.
#[derive(Debug, Clone, Copy)]
pub struct PreparedSet {
    pub xs: NodeId,
    projected: Option<NodeId>,
}

impl PotentialSpec {
    /// Dimension of the latent `y` for inputs of dimension `input_dim`.
    pub fn latent_dim(&self, input_dim: usize) -> usize {
        match self {
            PotentialSpec::Neural(p) => p.latent_dim,
            PotentialSpec::ClosedForm(_) | PotentialSpec::GaussianMap(_) => input_dim,
            PotentialSpec::Attention(p) => p.dim() + 1,
            PotentialSpec::PowerSum(p) => p.n,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        if let PotentialSpec::Neural(p) = self {
            p.init(store, rng);
        }
    }

    pub fn prepare(&self, g: &mut Graph, b: &Bound, xs: NodeId) -> Result<PreparedSet> {
        let projected = match self {
            PotentialSpec::Neural(p) => Some(p.project_inputs(g, b, xs)?),
            _ => None,
        };
        Ok(PreparedSet { xs, projected })
    }

    /// `[N]` vector of `F(xᵢ, y)`.
    pub fn terms(&self, g: &mut Graph, b: &Bound, set: &PreparedSet, y: NodeId) -> Result<NodeId> {
        match self {
            PotentialSpec::Neural(p) => {
                let xp = match set.projected {
                    Some(xp) => xp,
                    None => p.project_inputs(g, b, set.xs)?,
                };
                p.terms_projected(g, b, xp, y)
            }
            PotentialSpec::ClosedForm(k) => k.terms(g, set.xs, y),
            PotentialSpec::Attention(p) => p.terms(g, set.xs, y),
            PotentialSpec::PowerSum(p) => p.terms(g, set.xs, y),
            PotentialSpec::GaussianMap(p) => p.terms(g, set.xs, y),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_cols(g: &Graph, xs: NodeId, d: usize, what: &str) -> Result<()> {
    match g.shape(xs) {
        [_, c] if *c == d => Ok(()),
        s => Err(Error::Structure(format!(
            "{what}: expected [N, {d}], got {s:?}"
        ))),
    }
}

fn check_vec(g: &Graph, y: NodeId, d: usize, what: &str) -> Result<()> {
    match g.shape(y) {
        [n] if *n == d => Ok(()),
        s => Err(Error::Structure(format!(
            "{what}: expected [{d}], got {s:?}"
        ))),
    }
}
