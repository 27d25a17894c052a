//! Python module `equiagg_py`: aggregators, run configs, training,
//! checkpoints and the oracle suites.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use equiagg::aggregation::{
    aggregate_values, check_permutation_invariance, AggregatorKind, AggregatorSpec,
    EquilibriumSpec, MhaSpec, OutputTransform, PnaSpec,
};
use equiagg::checkpoint::Checkpoint;
use equiagg::config::RunConfig;
use equiagg::inner::InnerOptConfig;
use equiagg::model::build_model;
use equiagg::params::ParamStore;
use equiagg::potentials::{
    ClosedFormKind, GaussianMapPotential, NeuralPotential, PotentialSpec, Regularizer,
};
use equiagg::run::{run_training, RunOutcome};
use equiagg::tasks;
use equiagg::tensor::Tensor;
use equiagg::training::{eval_rng, evaluate, MetricsRecord};
use equiagg::verify::{closed_form_spec, run_suite, Suite};
use equiagg::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Config(_)
        | Error::Parse { .. }
        | Error::Structure(_)
        | Error::Domain(_)
        | Error::NotInImage(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn set_tensor(xs: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let d = xs.first().map_or(0, Vec::len);
    if xs.is_empty() || d == 0 || xs.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(
            "expected a non-empty list of equal-length rows",
        ));
    }
    Ok(Tensor::from_rows(&xs))
}

/// Run configuration in the `key = value` text format.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = "", overrides = None))]
    fn new(text: &str, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let inner = RunConfig::parse_with(text, &overrides.unwrap_or_default()).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.task.name()
    }

    #[getter]
    fn aggregator(&self) -> &'static str {
        self.inner.model.aggregator.name()
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.train.steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(task={}, aggregator={}, steps={}, seed={})",
            self.task(),
            self.aggregator(),
            self.steps(),
            self.seed()
        )
    }
}

/// An aggregator with its parameters.
#[pyclass(name = "Aggregator")]
struct PyAggregator {
    spec: AggregatorSpec,
    store: ParamStore,
}

#[pymethods]
impl PyAggregator {
    /// Randomly initialized aggregator of `kind` for `input_dim`-wide elements.
    #[new]
    #[pyo3(signature = (kind, input_dim, output_dim = 8, seed = 0))]
    fn new(kind: &str, input_dim: usize, output_dim: usize, seed: u64) -> PyResult<Self> {
        let spec = match AggregatorKind::parse(kind).map_err(py_err)? {
            AggregatorKind::Sum => AggregatorSpec::Sum,
            AggregatorKind::Mean => AggregatorSpec::Mean,
            AggregatorKind::Max => AggregatorSpec::Max,
            AggregatorKind::MultiHeadAttention => AggregatorSpec::MultiHeadAttention(
                MhaSpec::new("attention", input_dim, output_dim, 4).map_err(py_err)?,
            ),
            AggregatorKind::Pna => AggregatorSpec::Pna(PnaSpec::new("pna", input_dim, output_dim)),
            AggregatorKind::Equilibrium => AggregatorSpec::Equilibrium(EquilibriumSpec {
                potential: PotentialSpec::Neural(NeuralPotential::new(
                    "potential",
                    input_dim,
                    output_dim,
                    64,
                    1,
                )),
                regularizer: Regularizer::learned("regularizer.lambda"),
                inner: InnerOptConfig::learned("inner", 5),
                output: OutputTransform::Identity,
            }),
        };
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { spec, store })
    }

    /// Equilibrium aggregator reproducing `mean`, `median`, `max` or `sum`
    /// on scalar sets.
    #[staticmethod]
    fn closed_form(kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "mean" => ClosedFormKind::Mean,
            "median" => ClosedFormKind::Median,
            "max" => ClosedFormKind::Max,
            "sum" => ClosedFormKind::Sum,
            _ => {
                return Err(PyValueError::new_err(format!(
                    "unknown closed form `{kind}`"
                )))
            }
        };
        Ok(Self {
            spec: closed_form_spec(kind),
            store: ParamStore::new(),
        })
    }

    /// MAP estimate of a Gaussian mean with a zero-mean Gaussian prior.
    #[staticmethod]
    #[pyo3(signature = (sigma, prior_sigma, steps = 1000, alpha = 0.05, momentum = 0.9))]
    fn gaussian_map(
        sigma: f64,
        prior_sigma: f64,
        steps: usize,
        alpha: f64,
        momentum: f64,
    ) -> PyResult<Self> {
        if !(prior_sigma > 0.0) {
            return Err(PyValueError::new_err("prior_sigma must be positive"));
        }
        let pot = GaussianMapPotential::new(sigma).map_err(py_err)?;
        Ok(Self {
            spec: AggregatorSpec::Equilibrium(EquilibriumSpec {
                potential: PotentialSpec::GaussianMap(pot),
                regularizer: Regularizer::Fixed(GaussianMapPotential::prior_weight(prior_sigma)),
                inner: InnerOptConfig::fixed(steps, alpha, momentum),
                output: OutputTransform::Identity,
            }),
            store: ParamStore::new(),
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.spec.kind().name()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Aggregates a set given as a list of rows.
    fn __call__(&self, py: Python<'_>, xs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let t = set_tensor(xs)?;
        py.detach(|| aggregate_values(&self.store, &self.spec, &t))
            .map(|y| y.into_data())
            .map_err(py_err)
    }

    /// Largest output change over `trials` random reorderings of `xs`.
    #[pyo3(signature = (xs, trials = 20, seed = 0))]
    fn permutation_error(
        &self,
        py: Python<'_>,
        xs: Vec<Vec<f64>>,
        trials: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let t = set_tensor(xs)?;
        py.detach(|| {
            check_permutation_invariance(
                &self.store,
                &self.spec,
                &t,
                trials,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
        })
        .map_err(py_err)
    }
}

fn record_dict<'py>(py: Python<'py>, r: &MetricsRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("task_metric", r.task_metric)?;
    d.set_item("aux_loss_mean", r.aux_loss_mean)?;
    d.set_item("final_grad_maxnorm_mean", r.final_grad_maxnorm_mean)?;
    d.set_item("wall_seconds", r.wall_seconds)?;
    Ok(d)
}

/// Trains `config` into `out_dir`. Returns a dict with `status`
/// (`"completed"` or `"diverged"`) and either `metrics` or `step`, `error`
/// and `dump`.
#[pyfunction]
#[pyo3(signature = (config, out_dir, resume = false))]
fn train<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    out_dir: &str,
    resume: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let outcome = py
        .detach(|| run_training(&cfg, Path::new(out_dir), resume))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    match outcome {
        RunOutcome::Completed { metrics } => {
            d.set_item("status", "completed")?;
            let rows = metrics
                .iter()
                .map(|r| record_dict(py, r))
                .collect::<PyResult<Vec<_>>>()?;
            d.set_item("metrics", rows)?;
        }
        RunOutcome::Diverged { step, error, dump } => {
            d.set_item("status", "diverged")?;
            d.set_item("step", step)?;
            d.set_item("error", error)?;
            d.set_item("dump", dump.display().to_string())?;
        }
    }
    Ok(d)
}

/// Contents of a checkpoint: config text, step and `{name: (shape, values)}`.
#[pyfunction]
fn load_checkpoint<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let ck = Checkpoint::load(Path::new(path)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("config", ck.config.to_text())?;
    d.set_item("step", ck.state.step)?;
    let params = PyDict::new(py);
    for (name, e) in ck.state.store.iter() {
        params.set_item(name, (e.value.shape().to_vec(), e.value.data().to_vec()))?;
    }
    d.set_item("params", params)?;
    Ok(d)
}

/// Task metric of a checkpoint on `samples` draws from the run's evaluation stream.
#[pyfunction]
#[pyo3(signature = (path, samples = 1000))]
fn evaluate_checkpoint(py: Python<'_>, path: &str, samples: usize) -> PyResult<f64> {
    let ck = Checkpoint::load(Path::new(path)).map_err(py_err)?;
    py.detach(|| {
        let model = build_model(&ck.config.task, &ck.config.model)?;
        let mut rng = eval_rng(ck.config.train.seed);
        evaluate(&model, &ck.state.store, &ck.config.task, &mut rng, samples).map(|m| m.task_metric)
    })
    .map_err(py_err)
}

/// Runs an oracle suite; returns `(name, measured, tolerance, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (suite, seed = 0))]
fn verify(py: Python<'_>, suite: &str, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let suite = Suite::parse(suite).map_err(py_err)?;
    let checks = py.detach(|| run_suite(suite, seed)).map_err(py_err)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.name, c.measured, c.tolerance, c.passed))
        .collect())
}

#[pyfunction]
fn power_sum_forward(x: Vec<f64>) -> PyResult<Vec<f64>> {
    tasks::power_sum_forward(&x).map_err(py_err)
}

#[pyfunction]
fn power_sum_invert(y: Vec<f64>) -> PyResult<Vec<f64>> {
    tasks::power_sum_invert(&y).map_err(py_err)
}

#[pymodule]
fn equiagg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyAggregator>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(power_sum_forward, m)?)?;
    m.add_function(wrap_pyfunction!(power_sum_invert, m)?)?;
    Ok(())
}
