//! Oracle suites run by `equiagg verify`. Each check reports the measured
//! error next to its tolerance.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_values, check_permutation_invariance, AggregatorKind, AggregatorSpec,
    EquilibriumSpec, MhaSpec, OutputTransform, PnaSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, relative_error, FD_STEP};
use crate::inner::{size_scale, InnerOptConfig};
use crate::model::{build_model, ModelConfig};
use crate::params::ParamStore;
use crate::potentials::{
    median_interval, softmax_attention, AttentionPotential, ClosedFormKind, GaussianMapPotential,
    NeuralPotential, PotentialSpec, PowerSumPotential, Regularizer,
};
use crate::tasks::{power_sum_forward, power_sum_invert, MedianTaskConfig, Task};
use crate::tensor::Tensor;
use crate::training::{batch_objective, RunState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured < tolerance`.
    pub fn below(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured < tolerance,
        }
    }

    /// Passes when `measured > tolerance`.
    pub fn above(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured > tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: measured {:.3e}, tolerance {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Table1,
    Attention,
    Map,
    Universality,
    Gradcheck,
    Invariance,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Table1,
        Suite::Attention,
        Suite::Map,
        Suite::Universality,
        Suite::Gradcheck,
        Suite::Invariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Attention => "attention",
            Suite::Map => "map",
            Suite::Universality => "universality",
            Suite::Gradcheck => "gradcheck",
            Suite::Invariance => "invariance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match suite {
        Suite::Table1 => closed_forms(&mut rng, 50),
        Suite::Attention => attention(&mut rng, 50),
        Suite::Map => gaussian_map(&mut rng, 50),
        Suite::Universality => universality(&mut rng, 1000),
        Suite::Gradcheck => gradcheck(&mut rng),
        Suite::Invariance => invariance(&mut rng, 20, 20),
    }
}

/// Inner settings for piecewise-linear energies, where heavy momentum
/// overshoots the kink.
pub fn nonsmooth_tight() -> InnerOptConfig {
    InnerOptConfig::fixed(5000, 2e-4, 0.5)
}

/// Settings for the Max recovery. Above `max(X)` only the weak regularizer
/// pulls back, so momentum overshoot would persist; plain subgradient steps
/// bound the overshoot by one step.
pub fn max_tight() -> InnerOptConfig {
    InnerOptConfig::fixed(10_000, 5e-4, 0.0)
}

/// Weight of the `w y²` regularizer used for the Max recovery.
pub const MAX_REG_WEIGHT: f64 = 1e-4;

/// Equilibrium configuration reproducing a classical pooling.
pub fn closed_form_spec(kind: ClosedFormKind) -> AggregatorSpec {
    let (regularizer, inner) = match kind {
        ClosedFormKind::Mean => (Regularizer::None, InnerOptConfig::tight()),
        ClosedFormKind::Sum => (Regularizer::Fixed(0.5), InnerOptConfig::tight()),
        ClosedFormKind::Median => (Regularizer::None, nonsmooth_tight()),
        ClosedFormKind::Max => (Regularizer::Fixed(MAX_REG_WEIGHT), max_tight()),
    };
    AggregatorSpec::Equilibrium(EquilibriumSpec {
        potential: PotentialSpec::ClosedForm(kind),
        regularizer,
        inner,
        output: OutputTransform::Identity,
    })
}

/// Distance from `y` to the analytic aggregate; for Median, to the interval
/// of minimizers.
pub fn closed_form_error(kind: ClosedFormKind, xs: &[f64], y: f64) -> f64 {
    match kind {
        ClosedFormKind::Median => {
            let (lo, hi) = median_interval(xs);
            (lo - y).max(y - hi).max(0.0)
        }
        _ => (kind.analytic(xs) - y).abs(),
    }
}

pub fn closed_forms<R: Rng + ?Sized>(rng: &mut R, sets: usize) -> Result<Vec<Check>> {
    let data: Vec<Vec<f64>> = (0..sets)
        .map(|_| {
            let n = rng.random_range(1..=20);
            (0..n).map(|_| rng.random::<f64>()).collect()
        })
        .collect();
    let store = ParamStore::new();
    let mut out = Vec::new();
    for kind in ClosedFormKind::ALL {
        let spec = closed_form_spec(kind);
        let mut worst: f64 = 0.0;
        for xs in &data {
            let y =
                aggregate_values(&store, &spec, &Tensor::new(&[xs.len(), 1], xs.clone()))?.item();
            worst = worst.max(closed_form_error(kind, xs, y));
        }
        out.push(Check::below(format!("table1 {kind:?}"), worst, 1e-3));
    }
    Ok(out)
}

/// Fixed rates adapted to the curvature of one attention instance.
pub fn attention_settings(pot: &AttentionPotential, xs: &[Vec<f64>]) -> InnerOptConfig {
    let n = xs.len();
    let wsum: f64 = xs
        .iter()
        .map(|x| {
            x.iter()
                .zip(pot.query.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .exp()
        })
        .sum();
    let lmax = 2.0 * size_scale(n) * wsum.max(n as f64);
    InnerOptConfig::fixed(3000, 1.0 / lmax, 0.9)
}

pub fn attention<R: Rng + ?Sized>(rng: &mut R, instances: usize) -> Result<Vec<Check>> {
    let store = ParamStore::new();
    let (mut ratio_err, mut yr_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..instances {
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=6);
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let pot = AttentionPotential::new(h.clone());
        let inner = attention_settings(&pot, &rows);
        let xs = Tensor::from_rows(&rows);
        let softmax = softmax_attention(&h, &rows);
        let spec = |output| {
            AggregatorSpec::Equilibrium(EquilibriumSpec {
                potential: PotentialSpec::Attention(pot.clone()),
                regularizer: Regularizer::None,
                inner: inner.clone(),
                output,
            })
        };
        let ratio = aggregate_values(&store, &spec(OutputTransform::AttentionRatio), &xs)?;
        let y = aggregate_values(&store, &spec(OutputTransform::Identity), &xs)?;
        for j in 0..d {
            ratio_err = ratio_err.max((ratio.data()[j] - softmax[j]).abs());
            yr_err = yr_err.max((y.data()[j] - softmax[j]).abs());
        }
    }
    Ok(vec![
        Check::below("attention y_r/y_s vs softmax attention", ratio_err, 1e-4),
        Check::below("attention y_r vs softmax attention", yr_err, 1e-4),
    ])
}

pub fn gaussian_map<R: Rng + ?Sized>(rng: &mut R, instances: usize) -> Result<Vec<Check>> {
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=3);
        let sigma = rng.random_range(0.5..2.0);
        let prior = rng.random_range(0.5..2.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let pot = GaussianMapPotential::new(sigma)?;
        let spec = AggregatorSpec::Equilibrium(EquilibriumSpec {
            potential: PotentialSpec::GaussianMap(pot),
            regularizer: Regularizer::Fixed(GaussianMapPotential::prior_weight(prior)),
            inner: InnerOptConfig::fixed(1000, 0.05, 0.9),
            output: OutputTransform::Identity,
        });
        let y = aggregate_values(&store, &spec, &Tensor::from_rows(&rows))?;
        let exact = pot.posterior_mean(&rows, prior);
        for (a, e) in y.data().iter().zip(&exact) {
            worst = worst.max((a - e).abs());
        }
    }
    Ok(vec![Check::below(
        "gaussian MAP vs conjugate posterior mean",
        worst,
        1e-5,
    )])
}

/// Fixed rates for the power-sum energy, whose Hessian is a multiple of the identity.
pub fn power_sum_settings(n: usize) -> InnerOptConfig {
    let curvature = 2.0 * size_scale(n) / n as f64;
    InnerOptConfig::fixed(100, 0.5 / curvature, 0.0)
}

pub fn universality<R: Rng + ?Sized>(rng: &mut R, instances: usize) -> Result<Vec<Check>> {
    let random_set = |rng: &mut R| {
        let n = rng.random_range(1..=5);
        let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        x.sort_by(f64::total_cmp);
        x
    };
    let mut round_trip: f64 = 0.0;
    for _ in 0..instances {
        let x = random_set(rng);
        let back = power_sum_invert(&power_sum_forward(&x)?)?;
        for (a, b) in x.iter().zip(&back) {
            round_trip = round_trip.max((a - b).abs());
        }
    }

    let store = ParamStore::new();
    let mut numeric: f64 = 0.0;
    for _ in 0..instances.min(100) {
        let x = random_set(rng);
        let n = x.len();
        let spec = AggregatorSpec::Equilibrium(EquilibriumSpec {
            potential: PotentialSpec::PowerSum(PowerSumPotential { n }),
            regularizer: Regularizer::None,
            inner: power_sum_settings(n),
            output: OutputTransform::Identity,
        });
        let y = aggregate_values(&store, &spec, &Tensor::new(&[n, 1], x.clone()))?;
        for (a, e) in y.data().iter().zip(power_sum_forward(&x)?) {
            numeric = numeric.max((a - e).abs());
        }
    }

    let mut min_gap = f64::INFINITY;
    let mut pairs = 0;
    while pairs < instances {
        let a = random_set(rng);
        let mut b: Vec<f64> = (0..a.len()).map(|_| rng.random::<f64>()).collect();
        b.sort_by(f64::total_cmp);
        let gap = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        if gap <= 1e-3 {
            continue;
        }
        let (ya, yb) = (power_sum_forward(&a)?, power_sum_forward(&b)?);
        let diff = ya
            .iter()
            .zip(&yb)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        min_gap = min_gap.min(diff);
        pairs += 1;
    }

    Ok(vec![
        Check::below("power-sum invert(forward(x)) round trip", round_trip, 1e-6),
        Check::below("minimized power-sum energy vs power sums", numeric, 1e-5),
        Check::above("smallest image gap of distinct multisets", min_gap, 1e-6),
    ])
}

/// Parameter groups of the miniature Equilibrium model.
const GRAD_GROUPS: [(&str, &str); 5] = [
    ("potential θ", "potential."),
    ("regularizer λ", "regularizer."),
    ("inner lr_param", "inner.lr"),
    ("inner momentum_param", "inner.momentum"),
    ("readout", "readout."),
];

/// Finite-difference check of the full miniature model (`d_x = 1`, `M = 2`,
/// `H = 8`, `T = 3`, batch 2) per parameter group.
pub fn gradcheck<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let task = Task::Median(MedianTaskConfig {
        set_size: 3,
        ..Default::default()
    });
    let cfg = ModelConfig {
        latent: 2,
        potential_hidden: 8,
        potential_squares: 2,
        readout_hidden: 8,
        inner_steps: 3,
        ..ModelConfig::desk(AggregatorKind::Equilibrium, &task)
    };
    let model = build_model(&task, &cfg)?;
    let mut state = RunState::fresh(&model, rng.random());
    let batch = task.sample_batch(&mut state.rng, 2);
    let store = state.store;
    let w_aux = 0.1;
    let (g, loss, b) = batch_objective(&model, &store, &batch, w_aux)?;
    let names: Vec<String> = b.iter().map(|(n, _)| n.to_string()).collect();
    let grads = g.reverse_grad(loss, &b.nodes())?;
    let point = store.flatten();
    let mut offsets = Vec::with_capacity(names.len());
    let mut off = 0;
    for gr in &grads {
        offsets.push(off);
        off += gr.len();
    }
    let mut out = Vec::new();
    for (label, prefix) in GRAD_GROUPS {
        let mut worst: f64 = 0.0;
        let mut any = false;
        for (i, name) in names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            any = true;
            for (k, &analytic) in grads[i].data().iter().enumerate() {
                let idx = offsets[i] + k;
                let numeric = central_difference(
                    |v: &[f64]| {
                        let mut q = point.clone();
                        q[idx] = v[0];
                        let mut s = store.clone();
                        s.unflatten(&q);
                        batch_objective(&model, &s, &batch, w_aux)
                            .map(|(g, l, _)| g.value(l).item())
                            .unwrap_or(f64::NAN)
                    },
                    &[point[idx]],
                    FD_STEP,
                )
                .map_err(|e| Error::Domain(e.to_string()))?[0];
                if analytic.abs().max(numeric.abs()) > 1e-7 {
                    worst = worst.max(relative_error(analytic, numeric));
                }
            }
        }
        if !any {
            return Err(Error::MissingParam(prefix.to_string()));
        }
        out.push(Check::below(format!("gradcheck {label}"), worst, 1e-3));
    }
    Ok(out)
}

/// Every aggregator kind on `instances` random sets under `perms` reorderings.
pub fn invariance<R: Rng + ?Sized>(
    rng: &mut R,
    instances: usize,
    perms: usize,
) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for kind in [
        AggregatorKind::Sum,
        AggregatorKind::Mean,
        AggregatorKind::Max,
        AggregatorKind::MultiHeadAttention,
        AggregatorKind::Pna,
        AggregatorKind::Equilibrium,
    ] {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let n = rng.random_range(2..=100);
            let d = rng.random_range(1..=64);
            let spec = match kind {
                AggregatorKind::Sum => AggregatorSpec::Sum,
                AggregatorKind::Mean => AggregatorSpec::Mean,
                AggregatorKind::Max => AggregatorSpec::Max,
                AggregatorKind::MultiHeadAttention => {
                    AggregatorSpec::MultiHeadAttention(MhaSpec::new("mha", d, 8, 4)?)
                }
                AggregatorKind::Pna => AggregatorSpec::Pna(PnaSpec::new("pna", d, 8)),
                AggregatorKind::Equilibrium => AggregatorSpec::Equilibrium(EquilibriumSpec {
                    potential: PotentialSpec::Neural(NeuralPotential::new("pot", d, 4, 16, 4)),
                    regularizer: Regularizer::learned("lambda"),
                    inner: InnerOptConfig::learned("inner", 5),
                    output: OutputTransform::Identity,
                }),
            };
            let mut store = ParamStore::new();
            spec.init(&mut store, rng);
            let xs = Tensor::new(
                &[n, d],
                (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            worst = worst.max(check_permutation_invariance(
                &store, &spec, &xs, perms, rng,
            )?);
        }
        out.push(Check::below(
            format!("permutation invariance {}", kind.name()),
            worst,
            1e-6,
        ));
    }
    Ok(out)
}
