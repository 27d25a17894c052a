//! The unrolled inner minimizer: Nesterov gradient steps on the scaled set
//! energy, kept as one differentiable graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::potentials::{PotentialSpec, PreparedSet, Regularizer};
use crate::tensor::Tensor;

/// Added to the set size in the energy normalization.
pub const SIZE_EPS: f64 = 1e-8;

pub const INITIAL_STEP_SIZE: f64 = 0.1;
pub const INITIAL_MOMENTUM: f64 = 0.9;

/// Step size `α` and momentum `μ` of the inner loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepRates {
    /// `α = softplus(lr_param)`, `μ = sigmoid(momentum_param)`.
    Learned {
        lr_param: String,
        momentum_param: String,
        trainable: bool,
    },
    Fixed {
        alpha: f64,
        momentum: f64,
    },
}

/// Which energy's gradients the auxiliary loss penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxEnergy {
    Scaled,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptConfig {
    pub steps: usize,
    pub rates: StepRates,
    pub aux_energy: AuxEnergy,
}

impl InnerOptConfig {
    /// Trainable rates stored under `{prefix}.lr` and `{prefix}.momentum`.
    pub fn learned(prefix: &str, steps: usize) -> Self {
        Self {
            steps,
            rates: StepRates::Learned {
                lr_param: format!("{prefix}.lr"),
                momentum_param: format!("{prefix}.momentum"),
                trainable: true,
            },
            aux_energy: AuxEnergy::Scaled,
        }
    }

    pub fn fixed(steps: usize, alpha: f64, momentum: f64) -> Self {
        Self {
            steps,
            rates: StepRates::Fixed { alpha, momentum },
            aux_energy: AuxEnergy::Scaled,
        }
    }

    /// Settings used to compare against analytic minimizers of smooth energies.
    pub fn tight() -> Self {
        Self::fixed(200, 0.05, 0.9)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inner steps must be at least 1".into()));
        }
        if let StepRates::Fixed { alpha, momentum } = self.rates {
            if !(alpha > 0.0) || !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!(
                    "need alpha > 0 and momentum in [0, 1), got {alpha} and {momentum}"
                )));
            }
        }
        Ok(())
    }

    /// Registers the learned rate parameters at their initial values.
    pub fn init(&self, store: &mut ParamStore) {
        if let StepRates::Learned {
            lr_param,
            momentum_param,
            ..
        } = &self.rates
        {
            store.insert(
                lr_param.clone(),
                Tensor::scalar(softplus_inverse(INITIAL_STEP_SIZE)),
            );
            store.insert(
                momentum_param.clone(),
                Tensor::scalar(logit(INITIAL_MOMENTUM)),
            );
        }
    }

    /// Scalar nodes for `α` and `μ`.
    pub fn rate_nodes(&self, g: &mut Graph, b: &Bound) -> Result<(NodeId, NodeId)> {
        Ok(match &self.rates {
            StepRates::Learned {
                lr_param,
                momentum_param,
                trainable,
            } => {
                let mut lr = b.get(lr_param)?;
                let mut mom = b.get(momentum_param)?;
                if !trainable {
                    lr = g.detach(lr);
                    mom = g.detach(mom);
                }
                (g.softplus(lr), g.sigmoid(mom))
            }
            StepRates::Fixed { alpha, momentum } => (g.scalar(*alpha), g.scalar(*momentum)),
        })
    }
}

pub fn softplus_inverse(v: f64) -> f64 {
    v.exp_m1().ln()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log₂(N + 1) / (N + ε)`.
pub fn size_scale(n: usize) -> f64 {
    (n as f64 + 1.0).log2() / (n as f64 + SIZE_EPS)
}

/// Scaled energy of one set with its `y`-independent work precomputed.
#[derive(Debug, Clone, Copy)]
pub struct SetEnergy<'a> {
    potential: &'a PotentialSpec,
    regularizer: &'a Regularizer,
    set: PreparedSet,
    n: usize,
}

impl<'a> SetEnergy<'a> {
    /// `xs` is `[N, d_x]`.
    pub fn new(
        g: &mut Graph,
        b: &Bound,
        potential: &'a PotentialSpec,
        regularizer: &'a Regularizer,
        xs: NodeId,
    ) -> Result<Self> {
        let n = match g.shape(xs) {
            [n, _] => *n,
            s => return Err(Error::Structure(format!("set must be [N, d], got {s:?}"))),
        };
        let set = potential.prepare(g, b, xs)?;
        Ok(Self {
            potential,
            regularizer,
            set,
            n,
        })
    }

    pub fn set_size(&self) -> usize {
        self.n
    }

    pub fn eval(&self, g: &mut Graph, b: &Bound, y: NodeId) -> Result<NodeId> {
        if self.n == 0 {
            return Ok(g.scalar(0.0));
        }
        let terms = self.potential.terms(g, b, &self.set, y)?;
        if let Some(index) = g.value(terms).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePotential { index });
        }
        let mut e = g.sum(terms);
        if let Some(r) = self.regularizer.value(g, b, y)? {
            e = g.add(e, r)?;
        }
        Ok(g.scale(e, size_scale(self.n)))
    }
}

/// `[R(y) + Σᵢ F(xᵢ, y)] · log₂(N + 1) / (N + ε)` for a set `xs` of shape `[N, d_x]`.
pub fn scaled_energy(
    g: &mut Graph,
    b: &Bound,
    potential: &PotentialSpec,
    regularizer: &Regularizer,
    xs: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    SetEnergy::new(g, b, potential, regularizer, xs)?.eval(g, b, y)
}

/// Nodes produced by one unrolled minimization.
#[derive(Debug, Clone)]
pub struct EnergyState {
    /// `y⁽⁰⁾ … y⁽ᵀ⁾`.
    pub iterates: Vec<NodeId>,
    /// Energy gradients at each lookahead point.
    pub grads: Vec<NodeId>,
    /// Energy at each lookahead point.
    pub energies: Vec<NodeId>,
    /// `Σₜ ‖g⁽ᵗ⁾‖²`.
    pub aux_accumulator: NodeId,
    /// Squared ratio of raw to scaled energy gradients, applied by
    /// [`aux_loss`].
    pub aux_scale: f64,
}

impl EnergyState {
    /// State of a skipped minimization: `y = 0` and no gradients.
    pub fn empty(g: &mut Graph, m: usize) -> Self {
        let y0 = g.zeros(&[m]);
        let acc = g.scalar(0.0);
        Self {
            iterates: vec![y0],
            grads: Vec::new(),
            energies: Vec::new(),
            aux_accumulator: acc,
            aux_scale: 1.0,
        }
    }

    pub fn output(&self) -> NodeId {
        *self.iterates.last().expect("iterates start with y0")
    }

    pub fn steps(&self) -> usize {
        self.grads.len()
    }

    /// Rescales the auxiliary loss to the unnormalized energy of a set of size `n`.
    pub fn use_raw_energy(&mut self, n: usize) {
        if n > 0 {
            self.aux_scale = 1.0 / (size_scale(n) * size_scale(n));
        }
    }
}

/// Runs `config.steps` Nesterov steps on `energy` from `y⁽⁰⁾ = 0`:
/// `v ← μv − α∇E(y + μv)`, `y ← y + v`.
pub fn minimize_energy<F>(
    g: &mut Graph,
    b: &Bound,
    config: &InnerOptConfig,
    m: usize,
    mut energy: F,
) -> Result<EnergyState>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    config.validate()?;
    let (alpha, mu) = config.rate_nodes(g, b)?;
    let mut y = g.zeros(&[m]);
    let mut v: Option<NodeId> = None;
    let mut state = EnergyState {
        iterates: vec![y],
        grads: Vec::with_capacity(config.steps),
        energies: Vec::with_capacity(config.steps),
        aux_accumulator: y,
        aux_scale: 1.0,
    };
    let mut acc: Option<NodeId> = None;
    for step in 0..config.steps {
        let look = match v {
            Some(v) => {
                let mv = g.mul_scalar(mu, v)?;
                g.add(y, mv)?
            }
            None => y,
        };
        let e = energy(g, look)?;
        let grad = g.grad_as_graph(e, look)?;
        let step_vec = g.mul_scalar(alpha, grad)?;
        let new_v = match v {
            Some(v) => {
                let mv = g.mul_scalar(mu, v)?;
                g.sub(mv, step_vec)?
            }
            None => g.neg(step_vec),
        };
        y = g.add(y, new_v)?;
        v = Some(new_v);
        if !g.value(y).all_finite() {
            return Err(Error::Divergence {
                step,
                grad_norm: g.value(grad).norm_sq().sqrt(),
            });
        }
        let gn = g.norm_sq(grad);
        acc = Some(match acc {
            Some(a) => g.add(a, gn)?,
            None => gn,
        });
        state.iterates.push(y);
        state.grads.push(grad);
        state.energies.push(e);
    }
    state.aux_accumulator = acc.expect("at least one step");
    Ok(state)
}

/// `(1/T) Σₜ ‖g⁽ᵗ⁾‖²`; zero when no steps ran.
pub fn aux_loss(g: &mut Graph, state: &EnergyState) -> NodeId {
    if state.grads.is_empty() {
        return g.scalar(0.0);
    }
    let t = state.grads.len() as f64;
    g.scale(state.aux_accumulator, state.aux_scale / t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStats {
    /// `max_d |∂E/∂y_d|` at `y⁽ᵀ⁾`.
    pub final_grad_maxnorm: f64,
    pub aux_value: f64,
    pub energy_trajectory: Vec<f64>,
}

/// Diagnostics of a finished minimization. Evaluates the energy gradient
/// once more at the final iterate.
pub fn convergence_stats<F>(
    g: &mut Graph,
    state: &EnergyState,
    mut energy: F,
) -> Result<ConvergenceStats>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let aux = aux_loss(g, state);
    let aux_value = g.value(aux).item();
    let energy_trajectory = state.energies.iter().map(|&e| g.value(e).item()).collect();
    let final_grad_maxnorm = if state.grads.is_empty() {
        0.0
    } else {
        let y = g.leaf(g.value(state.output()).clone());
        let e = energy(g, y)?;
        g.reverse_grad(e, &[y])?[0].max_abs()
    };
    Ok(ConvergenceStats {
        final_grad_maxnorm,
        aux_value,
        energy_trajectory,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{finite_diff_check, FD_STEP};
    use crate::potentials::{ClosedFormKind, NeuralPotential};

    fn quadratic(target: f64) -> impl FnMut(&mut Graph, NodeId) -> Result<NodeId> {
        move |g, y| {
            let d = g.add_const(y, -target);
            Ok(g.norm_sq(d))
        }
    }

    #[test]
    fn scaled_energy_normalization() {
        assert!((5.0 * size_scale(1) - 5.0).abs() < 1e-7);
        assert!((6.0 * size_scale(3) - 4.0).abs() < 1e-7);
        let mut g = Graph::new();
        let b = Bound::default();
        let pot = PotentialSpec::ClosedForm(ClosedFormKind::Mean);
        let xs = g.leaf(Tensor::zeros(&[0, 1]));
        let y = g.leaf(Tensor::vector(vec![4.0]));
        let e = scaled_energy(&mut g, &b, &pot, &Regularizer::Fixed(1.0), xs, y).unwrap();
        assert_eq!(g.value(e).item(), 0.0);
    }

    #[test]
    fn scaled_energy_example_values() {
        let mut g = Graph::new();
        let b = Bound::default();
        let pot = PotentialSpec::ClosedForm(ClosedFormKind::Mean);
        let xs = g.leaf(Tensor::new(&[3, 1], vec![0.0, 1.0, 2.0]));
        let y = g.leaf(Tensor::vector(vec![1.0]));
        // Σ F = 2, R = 4 · 1 = 4.
        let e = scaled_energy(&mut g, &b, &pot, &Regularizer::Fixed(4.0), xs, y).unwrap();
        assert!((g.value(e).item() - 4.0).abs() < 1e-7);
    }

    #[test]
    fn quadratic_converges_without_momentum() {
        let mut g = Graph::new();
        let cfg = InnerOptConfig::fixed(30, 0.25, 0.0);
        let st = minimize_energy(&mut g, &Bound::default(), &cfg, 1, quadratic(3.0)).unwrap();
        assert!((g.value(st.output()).item() - 3.0).abs() < 1e-6);
        assert_eq!(st.iterates.len(), 31);
        assert_eq!(st.grads.len(), 30);
    }

    #[test]
    fn start_at_minimum_stays_there() {
        let mut g = Graph::new();
        let cfg = InnerOptConfig::fixed(10, 0.3, 0.9);
        let st = minimize_energy(&mut g, &Bound::default(), &cfg, 2, quadratic(0.0)).unwrap();
        for &y in &st.iterates {
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
        let aux = aux_loss(&mut g, &st);
        assert_eq!(g.value(aux).item(), 0.0);
    }

    #[test]
    fn mean_potential_tight_settings() {
        let mut g = Graph::new();
        let b = Bound::default();
        let pot = PotentialSpec::ClosedForm(ClosedFormKind::Mean);
        let reg = Regularizer::None;
        let xs = g.leaf(Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]));
        let en = SetEnergy::new(&mut g, &b, &pot, &reg, xs).unwrap();
        let st = minimize_energy(&mut g, &b, &InnerOptConfig::tight(), 1, |g, y| {
            en.eval(g, &b, y)
        })
        .unwrap();
        assert!((g.value(st.output()).item() - 2.0).abs() < 1e-4);
        let stats = convergence_stats(&mut g, &st, |g, y| en.eval(g, &b, y)).unwrap();
        assert!(stats.final_grad_maxnorm < 1e-6);
    }

    #[test]
    fn aux_loss_is_mean_squared_gradient_norm() {
        let mut g = Graph::new();
        let g1 = g.leaf(Tensor::vector(vec![2.0, 0.0]));
        let g2 = g.leaf(Tensor::vector(vec![0.0, 1.0]));
        let n1 = g.norm_sq(g1);
        let n2 = g.norm_sq(g2);
        let acc = g.add(n1, n2).unwrap();
        let y0 = g.zeros(&[2]);
        let st = EnergyState {
            iterates: vec![y0, y0, y0],
            grads: vec![g1, g2],
            energies: vec![],
            aux_accumulator: acc,
            aux_scale: 1.0,
        };
        let a = aux_loss(&mut g, &st);
        assert_eq!(g.value(a).item(), 2.5);
    }

    #[test]
    fn final_grad_maxnorm_is_max_abs() {
        let mut g = Graph::new();
        let cfg = InnerOptConfig::fixed(1, 1e-12, 0.0);
        let c = Tensor::vector(vec![0.01, -0.03]);
        // E = c·y has constant gradient c.
        let energy = |g: &mut Graph, y: NodeId| {
            let cn = g.leaf(c.clone());
            let p = g.mul(cn, y)?;
            Ok(g.sum(p))
        };
        let st = minimize_energy(&mut g, &Bound::default(), &cfg, 2, energy).unwrap();
        let stats = convergence_stats(&mut g, &st, energy).unwrap();
        assert!((stats.final_grad_maxnorm - 0.03).abs() < 1e-15);
    }

    #[test]
    fn small_step_trajectory_is_monotone() {
        let mut g = Graph::new();
        let b = Bound::default();
        let pot = PotentialSpec::ClosedForm(ClosedFormKind::Mean);
        let reg = Regularizer::Fixed(0.1);
        let xs = g.leaf(Tensor::new(
            &[4, 2],
            vec![0.1, 0.9, 0.4, -0.2, 0.7, 0.3, 0.0, 0.5],
        ));
        let en = SetEnergy::new(&mut g, &b, &pot, &reg, xs).unwrap();
        let cfg = InnerOptConfig::fixed(50, 0.01, 0.0);
        let st = minimize_energy(&mut g, &b, &cfg, 2, |g, y| en.eval(g, &b, y)).unwrap();
        let stats = convergence_stats(&mut g, &st, |g, y| en.eval(g, &b, y)).unwrap();
        for w in stats.energy_trajectory.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn huge_step_reports_divergence() {
        let mut g = Graph::new();
        let cfg = InnerOptConfig::fixed(500, 1e3, 0.0);
        let err = minimize_energy(&mut g, &Bound::default(), &cfg, 1, quadratic(1.0)).unwrap_err();
        match err {
            Error::Divergence { step, grad_norm } => {
                assert!(step > 0 && step < 500);
                assert!(grad_norm > 1e100);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn stationary_points_do_not_depend_on_scaling() {
        let xs_data = vec![0.3, -1.2, 0.8, 0.4, 2.0, -0.5];
        let run = |scaled: bool| {
            let mut g = Graph::new();
            let b = Bound::default();
            let xs = Tensor::new(&[3, 2], xs_data.clone());
            let energy = |g: &mut Graph, y: NodeId| {
                let x = g.leaf(xs.clone());
                let t = ClosedFormKind::Mean.terms(g, x, y)?;
                let s = g.sum(t);
                let r = g.norm_sq(y);
                let r = g.scale(r, 0.3);
                let e = g.add(s, r)?;
                Ok(if scaled { g.scale(e, size_scale(3)) } else { e })
            };
            let cfg = InnerOptConfig::fixed(1000, 0.05, 0.9);
            let st = minimize_energy(&mut g, &b, &cfg, 2, energy).unwrap();
            g.value(st.output()).clone()
        };
        let a = run(true);
        let u = run(false);
        for (p, q) in a.data().iter().zip(u.data()) {
            assert!((p - q).abs() < 1e-8, "{p} vs {q}");
        }
    }

    #[test]
    fn learned_rates_start_at_defaults() {
        let mut store = ParamStore::new();
        let cfg = InnerOptConfig::learned("inner", 5);
        cfg.init(&mut store);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let (a, m) = cfg.rate_nodes(&mut g, &b).unwrap();
        assert!((g.value(a).item() - INITIAL_STEP_SIZE).abs() < 1e-12);
        assert!((g.value(m).item() - INITIAL_MOMENTUM).abs() < 1e-12);
    }

    fn unrolled_loss(store: &ParamStore, xs: &Tensor, target: &[f64]) -> (Graph, NodeId, Bound) {
        let pot = PotentialSpec::Neural(NeuralPotential::new("pot", 1, 2, 8, 4));
        let reg = Regularizer::learned("lambda");
        let cfg = InnerOptConfig::learned("inner", 3);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.leaf(xs.clone());
        let en = SetEnergy::new(&mut g, &b, &pot, &reg, x).unwrap();
        let st = minimize_energy(&mut g, &b, &cfg, 2, |g, y| en.eval(g, &b, y)).unwrap();
        let t = g.leaf(Tensor::vector(target.to_vec()));
        let d = g.sub(st.output(), t).unwrap();
        let loss = g.norm_sq(d);
        (g, loss, b)
    }

    #[test]
    fn unrolled_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pot = NeuralPotential::new("pot", 1, 2, 8, 4);
        let mut store = ParamStore::new();
        pot.init(&mut store, &mut rng);
        Regularizer::learned("lambda").init(&mut store);
        InnerOptConfig::learned("inner", 3).init(&mut store);
        // Move λ off its initial value so its gradient path is generic.
        *store.get_mut("lambda").unwrap() = Tensor::scalar(-0.4);
        let xs = Tensor::new(
            &[3, 1],
            (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
        );
        let target = [0.7, -0.2];

        let (g, loss, b) = unrolled_loss(&store, &xs, &target);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let ids: Vec<NodeId> = names.iter().map(|n| b.get(n).unwrap()).collect();
        let grads = g.reverse_grad(loss, &ids).unwrap();

        let base = store.flatten();
        let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let f = |q: &[f64]| {
            let mut s = store.clone();
            s.unflatten(q);
            let (g, l, _) = unrolled_loss(&s, &xs, &target);
            g.value(l).item()
        };
        let err = finite_diff_check(f, &analytic, &base, FD_STEP).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
        for name in ["lambda", "inner.lr", "inner.momentum"] {
            let i = names.iter().position(|n| n == name).unwrap();
            assert!(grads[i].item().abs() > 1e-8, "{name} has no gradient");
        }
    }
}
