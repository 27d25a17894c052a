//! Outer loop: task losses, Adam, the train/evaluate cycle and its metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Reduce};
use crate::error::{Error, Result};
use crate::inner::{aux_loss, EnergyState};
use crate::model::{Head, Model};
use crate::params::{Bound, ParamStore};
use crate::tasks::{Target, Task, TaskSample};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_CLIP: f64 = 10.0;
pub const DEFAULT_W_AUX: f64 = 1e-4;

/// Stream of the evaluation RNG; training draws use stream 0.
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub w_aux: f64,
    pub eval_period: u64,
    pub eval_samples: usize,
    pub seed: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            steps: 1000,
            w_aux: DEFAULT_W_AUX,
            eval_period: 100,
            eval_samples: 1000,
            seed: 0,
            clip: Some(DEFAULT_CLIP),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.eval_period == 0 || self.w_aux < 0.0 {
            return Err(Error::Config(
                "lr, batch size and eval period must be positive and w_aux non-negative".into(),
            ));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let entry = store
            .entry(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        if entry.value.shape() != g.shape() {
            return Err(Error::Structure(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                entry.value.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let e = store.entry_mut(name).expect("checked above");
        let (value, m, v) = (e.value.data_mut(), e.m.data_mut(), e.v.data_mut());
        for i in 0..g.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// `task_loss + w_aux · mean(aux_loss(state))`.
pub fn total_loss(
    g: &mut Graph,
    task_loss: NodeId,
    states: &[&EnergyState],
    w_aux: f64,
) -> Result<NodeId> {
    if states.is_empty() || w_aux == 0.0 {
        return Ok(task_loss);
    }
    let mut acc: Option<NodeId> = None;
    for st in states {
        let a = aux_loss(g, st);
        acc = Some(match acc {
            Some(s) => g.add(s, a)?,
            None => a,
        });
    }
    let mean = g.scale(acc.expect("non-empty"), w_aux / states.len() as f64);
    Ok(g.add(task_loss, mean)?)
}

/// `log Σ exp(logits) - logits[class]`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, class: usize) -> Result<NodeId> {
    let k = g.shape(logits)[0];
    if class >= k {
        return Err(Error::Structure(format!(
            "class {class} out of range for {k} logits"
        )));
    }
    let top = g.max_axis(logits, Reduce::All)?;
    let top = g.detach(top);
    let topb = g.broadcast_scalar(top, &[k])?;
    let shifted = g.sub(logits, topb)?;
    let e = g.exp(shifted);
    let z = g.sum(e);
    let lse = g.log(z);
    let lse = g.add(lse, top)?;
    let picked = g.slice(logits, 0, class, 1)?;
    let picked = g.reshape(picked, &[])?;
    Ok(g.sub(lse, picked)?)
}

/// Per-sample task loss: squared error or cross-entropy.
pub fn sample_task_loss(
    g: &mut Graph,
    head: Head,
    pred: NodeId,
    target: &Target,
) -> Result<NodeId> {
    match (head, target) {
        (Head::Regression, Target::Value(y)) => {
            let d = g.add_const(pred, -y);
            Ok(g.square(d))
        }
        (Head::Classes(_), Target::Class(c)) => cross_entropy(g, pred, *c),
        _ => Err(Error::Structure(
            "target does not match the model head".into(),
        )),
    }
}

/// Task metric of one prediction: squared error, or 1/0 for a correct/wrong argmax.
pub fn sample_metric(head: Head, pred: &Tensor, target: &Target) -> f64 {
    match (head, target) {
        (Head::Classes(_), Target::Class(c)) => {
            let d = pred.data();
            let arg = (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best });
            if arg == *c {
                1.0
            } else {
                0.0
            }
        }
        _ => {
            let e = pred.item() - target.value();
            e * e
        }
    }
}

/// One graph holding the full batch objective; used for gradient checks.
pub fn batch_objective(
    model: &Model,
    store: &ParamStore,
    batch: &[TaskSample],
    w_aux: f64,
) -> Result<(Graph, NodeId, Bound)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let mut losses = Vec::with_capacity(batch.len());
    let mut states = Vec::new();
    for s in batch {
        let x = g.leaf(s.set.clone());
        let (pred, agg) = model.forward(&mut g, &b, x)?;
        losses.push(sample_task_loss(&mut g, model.head, pred, &s.target)?);
        states.extend(agg.state);
    }
    let mut rows = Vec::with_capacity(losses.len());
    for &l in &losses {
        rows.push(g.reshape(l, &[1])?);
    }
    let stacked = g.concat(&rows, 0)?;
    let task = g.mean(stacked)?;
    let refs: Vec<&EnergyState> = states.iter().collect();
    let total = total_loss(&mut g, task, &refs, w_aux)?;
    Ok((g, total, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    pub task_loss: f64,
    pub aux_mean: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Gradient of the batch objective, accumulated one sample graph at a time
/// in batch order.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &[TaskSample],
    w_aux: f64,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Structure("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = store
        .iter()
        .map(|(n, e)| (n.to_string(), Tensor::zeros(e.value.shape())))
        .collect();
    let (mut loss, mut task_sum, mut aux_sum) = (0.0, 0.0, 0.0);
    for s in batch {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.leaf(s.set.clone());
        let (pred, agg) = model.forward(&mut g, &b, x)?;
        let tl = sample_task_loss(&mut g, model.head, pred, &s.target)?;
        task_sum += g.value(tl).item();
        let mut obj = tl;
        if let Some(st) = &agg.state {
            let a = aux_loss(&mut g, st);
            aux_sum += g.value(a).item();
            if w_aux != 0.0 {
                let wa = g.scale(a, w_aux);
                obj = g.add(obj, wa)?;
            }
        }
        let obj = g.scale(obj, scale);
        loss += g.value(obj).item();
        let ids = b.nodes();
        let gs = g.reverse_grad(obj, &ids)?;
        for ((name, _), gr) in b.iter().zip(gs) {
            grads
                .get_mut(name)
                .expect("bound from store")
                .add_assign(&gr);
        }
    }
    Ok(BatchGradients {
        loss,
        task_loss: task_sum * scale,
        aux_mean: aux_sum * scale,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error for regression, accuracy for classification.
    pub task_metric: f64,
    pub aux_loss_mean: Option<f64>,
    pub final_grad_maxnorm_mean: Option<f64>,
    pub samples: usize,
}

/// Averages the task metric and inner-loop diagnostics over `samples`.
pub fn evaluate_samples(
    model: &Model,
    store: &ParamStore,
    samples: &[TaskSample],
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let (mut metric, mut aux, mut gmax, mut diag) = (0.0, 0.0, 0.0, 0usize);
    for s in samples {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.leaf(s.set.clone());
        let (pred, _, stats) = model.forward_diagnosed(&mut g, &b, x)?;
        metric += sample_metric(model.head, g.value(pred), &s.target);
        if let Some(st) = stats {
            aux += st.aux_value;
            gmax += st.final_grad_maxnorm;
            diag += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(EvalMetrics {
        task_metric: metric / n,
        aux_loss_mean: (diag > 0).then(|| aux / diag as f64),
        final_grad_maxnorm_mean: (diag > 0).then(|| gmax / diag as f64),
        samples: samples.len(),
    })
}

/// Evaluates on `n_samples` fresh draws from `task`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    task: &Task,
    rng: &mut ChaCha8Rng,
    n_samples: usize,
) -> Result<EvalMetrics> {
    if n_samples == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let samples = task.sample_batch(rng, n_samples);
    evaluate_samples(model, store, &samples)
}

/// The fixed evaluation stream of a run.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    rng
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub task_metric: f64,
    pub aux_loss_mean: Option<f64>,
    pub final_grad_maxnorm_mean: Option<f64>,
    pub wall_seconds: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub store: ParamStore,
    pub rng: ChaCha8Rng,
    /// Completed outer steps.
    pub step: u64,
}

impl RunState {
    /// Initial parameters drawn from the run seed; batches continue on the
    /// same stream.
    pub fn fresh(model: &Model, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = model.init(&mut rng);
        Self {
            store,
            rng,
            step: 0,
        }
    }
}

pub enum TrainEvent<'a> {
    Eval {
        record: &'a MetricsRecord,
        state: &'a RunState,
    },
    Diverged {
        step: u64,
        error: &'a Error,
        state: &'a RunState,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: RunState,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains from a fresh initialization.
pub fn train<F>(
    model: &Model,
    task: &Task,
    config: &TrainConfig,
    observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    let state = RunState::fresh(model, config.seed);
    train_from(model, task, config, state, true, observer)
}

/// Continues `state` up to `config.steps`. With `wall_clock = false` the
/// recorded wall time is 0 so the metrics stream is a pure function of the
/// seed and config.
pub fn train_from<F>(
    model: &Model,
    task: &Task,
    config: &TrainConfig,
    mut state: RunState,
    wall_clock: bool,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    config.validate()?;
    let start = Instant::now();
    let mut metrics = Vec::new();
    while state.step < config.steps {
        let step = state.step + 1;
        let batch = task.sample_batch(&mut state.rng, config.batch_size);
        let result =
            batch_gradients(model, &state.store, &batch, config.w_aux).and_then(|mut bg| {
                if let Some(c) = config.clip {
                    clip_global_norm(&mut bg.grads, c);
                }
                adam_step(&mut state.store, &bg.grads, config.lr)
            });
        if let Err(error) = result {
            observer(TrainEvent::Diverged {
                step,
                error: &error,
                state: &state,
            })?;
            return Err(error);
        }
        state.step = step;
        if step % config.eval_period == 0 || step == config.steps {
            let m = evaluate(
                model,
                &state.store,
                task,
                &mut eval_rng(config.seed),
                config.eval_samples,
            )?;
            let record = MetricsRecord {
                step,
                task_metric: m.task_metric,
                aux_loss_mean: m.aux_loss_mean,
                final_grad_maxnorm_mean: m.final_grad_maxnorm_mean,
                wall_seconds: if wall_clock {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            observer(TrainEvent::Eval {
                record: &record,
                state: &state,
            })?;
            metrics.push(record);
        }
    }
    Ok(TrainOutcome { state, metrics })
}
