//! Encode → aggregate → readout models for the two tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, aggregate_diagnosed, Aggregated, AggregatorKind, AggregatorSpec, EquilibriumSpec,
    MhaSpec, OutputTransform, PnaSpec,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::inner::{AuxEnergy, ConvergenceStats, InnerOptConfig};
use crate::layers::ResMlp;
use crate::params::{Bound, ParamStore};
use crate::potentials::{NeuralPotential, PotentialSpec, Regularizer};
use crate::tasks::Task;

/// Architecture sizes. Defaults are the desk-scale widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub aggregator: AggregatorKind,
    /// Set embedding size `D`.
    pub latent: usize,
    pub encoder_hidden: usize,
    pub potential_hidden: usize,
    pub potential_squares: usize,
    pub potential_blocks: usize,
    pub readout_hidden: usize,
    pub heads: usize,
    pub inner_steps: usize,
    pub aux_energy: AuxEnergy,
}

impl ModelConfig {
    pub fn desk(aggregator: AggregatorKind, task: &Task) -> Self {
        Self {
            aggregator,
            latent: 8,
            encoder_hidden: 64,
            potential_hidden: 64,
            potential_squares: match task {
                Task::ClassCount(_) => 32,
                _ => 1,
            },
            potential_blocks: 2,
            readout_hidden: 128,
            heads: 4,
            inner_steps: 5,
            aux_energy: AuxEnergy::Scaled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Regression,
    Classes(usize),
}

impl Head {
    pub fn width(self) -> usize {
        match self {
            Head::Regression => 1,
            Head::Classes(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_dim: usize,
    /// Per-element encoder; absent for Equilibrium Aggregation, whose
    /// potential reads the raw elements.
    pub encoder: Option<ResMlp>,
    pub aggregator: AggregatorSpec,
    pub readout: ResMlp,
    pub head: Head,
}

/// Wires the model for `task`.
pub fn build_model(task: &Task, config: &ModelConfig) -> Result<Model> {
    let d_x = task.input_dim();
    let d = config.latent;
    if d == 0 || config.inner_steps == 0 {
        return Err(Error::Structure(
            "latent size and inner steps must be positive".into(),
        ));
    }
    let encoder = match config.aggregator {
        AggregatorKind::Equilibrium => None,
        _ => Some(ResMlp::new("encoder", d_x, config.encoder_hidden, 1, d)),
    };
    let aggregator = match config.aggregator {
        AggregatorKind::Equilibrium => AggregatorSpec::Equilibrium(EquilibriumSpec {
            potential: PotentialSpec::Neural(NeuralPotential::with_blocks(
                "potential",
                d_x,
                d,
                config.potential_hidden,
                config.potential_squares,
                config.potential_blocks,
            )),
            regularizer: Regularizer::learned("regularizer.lambda"),
            inner: InnerOptConfig {
                aux_energy: config.aux_energy,
                ..InnerOptConfig::learned("inner", config.inner_steps)
            },
            output: OutputTransform::Identity,
        }),
        AggregatorKind::Sum => AggregatorSpec::Sum,
        AggregatorKind::Mean => AggregatorSpec::Mean,
        AggregatorKind::Max => AggregatorSpec::Max,
        AggregatorKind::MultiHeadAttention => {
            AggregatorSpec::MultiHeadAttention(MhaSpec::new("attention", d, d, config.heads)?)
        }
        AggregatorKind::Pna => AggregatorSpec::Pna(PnaSpec::new("pna", d, d)),
    };
    let head = match task.num_classes() {
        Some(k) => Head::Classes(k),
        None => Head::Regression,
    };
    let agg_in = if encoder.is_some() { d } else { d_x };
    let agg_out = aggregator.output_dim(agg_in);
    Ok(Model {
        input_dim: d_x,
        encoder,
        aggregator,
        readout: ResMlp::new("readout", agg_out, config.readout_hidden, 1, head.width()),
        head,
    })
}

impl Model {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        if let Some(enc) = &self.encoder {
            enc.init(&mut store, rng);
        }
        self.aggregator.init(&mut store, rng);
        self.readout.init(&mut store, rng);
        store
    }

    pub fn with_inner(&self, inner: InnerOptConfig) -> Model {
        let mut m = self.clone();
        if let AggregatorSpec::Equilibrium(e) = &mut m.aggregator {
            e.inner = inner;
        }
        m
    }

    /// Prediction for one set `[N, d_x]`: a scalar for regression, a `[K]`
    /// logit vector for classification.
    pub fn forward(&self, g: &mut Graph, b: &Bound, set: NodeId) -> Result<(NodeId, Aggregated)> {
        let (pred, agg, _) = self.forward_impl(g, b, set, false)?;
        Ok((pred, agg))
    }

    /// [`Model::forward`] plus inner-loop diagnostics.
    pub fn forward_diagnosed(
        &self,
        g: &mut Graph,
        b: &Bound,
        set: NodeId,
    ) -> Result<(NodeId, Aggregated, Option<ConvergenceStats>)> {
        self.forward_impl(g, b, set, true)
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        b: &Bound,
        set: NodeId,
        diagnose: bool,
    ) -> Result<(NodeId, Aggregated, Option<ConvergenceStats>)> {
        match g.shape(set) {
            [_, c] if *c == self.input_dim => {}
            s => {
                return Err(Error::Structure(format!(
                    "model expects sets of shape [N, {}], got {s:?}",
                    self.input_dim
                )))
            }
        }
        let h = match &self.encoder {
            Some(enc) => enc.forward(g, b, set)?,
            None => set,
        };
        let (agg, stats) = if diagnose {
            aggregate_diagnosed(g, b, &self.aggregator, h)?
        } else {
            (aggregate(g, b, &self.aggregator, h)?, None)
        };
        let width = g.shape(agg.output)[0];
        let row = g.reshape(agg.output, &[1, width])?;
        let out = self.readout.forward(g, b, row)?;
        let pred = match self.head {
            Head::Regression => g.reshape(out, &[])?,
            Head::Classes(k) => g.reshape(out, &[k])?,
        };
        Ok((pred, agg, stats))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::potentials::PotentialSpec;
    use crate::tasks::{ClassCountTaskConfig, MedianTaskConfig};
    use crate::tensor::Tensor;

    #[test]
    fn median_equilibrium_potential_reads_d_plus_one_inputs() {
        let task = Task::Median(MedianTaskConfig::default());
        let m = build_model(
            &task,
            &ModelConfig::desk(AggregatorKind::Equilibrium, &task),
        )
        .unwrap();
        assert!(m.encoder.is_none());
        let AggregatorSpec::Equilibrium(e) = &m.aggregator else {
            panic!()
        };
        let PotentialSpec::Neural(p) = &e.potential else {
            panic!()
        };
        assert_eq!(p.input_dim + p.latent_dim, 8 + 1);
    }

    #[test]
    fn median_sum_encoder_emits_d() {
        let task = Task::Median(MedianTaskConfig::default());
        let m = build_model(&task, &ModelConfig::desk(AggregatorKind::Sum, &task)).unwrap();
        assert_eq!(m.encoder.as_ref().unwrap().output.fan_out, 8);
        assert_eq!(m.readout.input.fan_in, 8);
        assert_eq!(m.readout.output.fan_out, 1);
    }

    #[test]
    fn classcount_emits_ten_logits() {
        let task = Task::ClassCount(ClassCountTaskConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [
            AggregatorKind::Equilibrium,
            AggregatorKind::Sum,
            AggregatorKind::MultiHeadAttention,
        ] {
            let m = build_model(&task, &ModelConfig::desk(kind, &task)).unwrap();
            let store = m.init(&mut rng);
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let s = task.sample_batch(&mut rng, 1).remove(0);
            let x = g.leaf(s.set);
            let (pred, _) = m.forward(&mut g, &b, x).unwrap();
            assert_eq!(g.shape(pred), &[10]);
        }
    }

    #[test]
    fn wrong_input_width_is_structural() {
        let task = Task::Median(MedianTaskConfig::default());
        let m = build_model(&task, &ModelConfig::desk(AggregatorKind::Sum, &task)).unwrap();
        let store = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(m.forward(&mut g, &b, x), Err(Error::Structure(_))));
    }
}
