//! Run configuration as a flat `key = value` text file with dotted keys.
//!
//! ```text
//! # median vs sum
//! task = median
//! model.aggregator = equilibrium
//! train.steps = 50000
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::aggregation::AggregatorKind;
use crate::error::{Error, Result};
use crate::inner::AuxEnergy;
use crate::model::ModelConfig;
use crate::tasks::{ClassCountTaskConfig, LinearTaskConfig, MedianFamily, MedianTaskConfig, Task};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Record elapsed time in the metrics stream. Off makes the stream a pure
    /// function of the config.
    pub wall_clock: bool,
    /// Run directory; empty means derived from the output root.
    pub output_dir: String,
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "task",
    "model.aggregator",
    "model.latent",
    "model.encoder_hidden",
    "model.potential_hidden",
    "model.potential_squares",
    "model.potential_blocks",
    "model.readout_hidden",
    "model.heads",
    "inner.steps",
    "inner.aux_energy",
    "train.lr",
    "train.batch_size",
    "train.steps",
    "train.w_aux",
    "train.eval_period",
    "train.eval_samples",
    "train.seed",
    "train.clip",
    "train.wall_clock",
    "median.set_size",
    "median.families",
    "classcount.set_size",
    "classcount.max_classes",
    "classcount.dim",
    "classcount.noise",
    "linear.set_size",
    "linear.slope",
    "linear.intercept",
    "output.dir",
];

pub fn parse_task(name: &str) -> Result<Task> {
    match name {
        "median" => Ok(Task::Median(MedianTaskConfig::default())),
        "classcount" => Ok(Task::ClassCount(ClassCountTaskConfig::default())),
        "linear" => Ok(Task::Linear(LinearTaskConfig::default())),
        _ => Err(Error::Config(format!("task: unknown task `{name}`"))),
    }
}

fn family_name(f: MedianFamily) -> String {
    match f {
        MedianFamily::Uniform => "uniform".into(),
        MedianFamily::Gamma => "gamma".into(),
        MedianFamily::Normal => "normal".into(),
        MedianFamily::Constant(c) => format!("constant:{c}"),
    }
}

fn parse_family(s: &str) -> Option<MedianFamily> {
    match s {
        "uniform" => Some(MedianFamily::Uniform),
        "gamma" => Some(MedianFamily::Gamma),
        "normal" => Some(MedianFamily::Normal),
        _ => s
            .strip_prefix("constant:")?
            .parse()
            .ok()
            .map(MedianFamily::Constant),
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{raw}`")))
}

fn mismatch(key: &str, task: &Task) -> Error {
    Error::Config(format!("{key}: not applicable to task `{}`", task.name()))
}

impl RunConfig {
    /// Desk-scale defaults for `task` and `aggregator`.
    pub fn new(task: Task, aggregator: AggregatorKind) -> Self {
        let model = ModelConfig::desk(aggregator, &task);
        Self {
            task,
            model,
            train: TrainConfig::default(),
            wall_clock: true,
            output_dir: String::new(),
        }
    }

    /// Builds a config from key-value pairs; later pairs win. `task` and
    /// `model.aggregator` select the defaults the other keys modify.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("{k}: unknown key")));
            }
            map.insert(k, v);
        }
        let task = parse_task(map.get("task").copied().unwrap_or("median"))?;
        let agg = match map.get("model.aggregator") {
            Some(a) => AggregatorKind::parse(a)
                .map_err(|_| Error::Config(format!("model.aggregator: unknown `{a}`")))?,
            None => AggregatorKind::Equilibrium,
        };
        let mut cfg = RunConfig::new(task, agg);
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the text format, then applies `overrides` on top.
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            pairs.push((k.trim(), v.trim()));
        }
        pairs.extend(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        Self::from_pairs(pairs)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::parse_with(&std::fs::read_to_string(path)?, overrides)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "task" | "model.aggregator" => {}
            "model.latent" => m.latent = value(key, raw)?,
            "model.encoder_hidden" => m.encoder_hidden = value(key, raw)?,
            "model.potential_hidden" => m.potential_hidden = value(key, raw)?,
            "model.potential_squares" => m.potential_squares = value(key, raw)?,
            "model.potential_blocks" => m.potential_blocks = value(key, raw)?,
            "model.readout_hidden" => m.readout_hidden = value(key, raw)?,
            "model.heads" => m.heads = value(key, raw)?,
            "inner.steps" => m.inner_steps = value(key, raw)?,
            "inner.aux_energy" => {
                m.aux_energy = match raw {
                    "scaled" => AuxEnergy::Scaled,
                    "raw" => AuxEnergy::Raw,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected scaled or raw, got `{raw}`"
                        )))
                    }
                }
            }
            "train.lr" => t.lr = value(key, raw)?,
            "train.batch_size" => t.batch_size = value(key, raw)?,
            "train.steps" => t.steps = value(key, raw)?,
            "train.w_aux" => t.w_aux = value(key, raw)?,
            "train.eval_period" => t.eval_period = value(key, raw)?,
            "train.eval_samples" => t.eval_samples = value(key, raw)?,
            "train.seed" => t.seed = value(key, raw)?,
            "train.clip" => {
                t.clip = if raw == "none" {
                    None
                } else {
                    Some(value(key, raw)?)
                }
            }
            "train.wall_clock" => self.wall_clock = value(key, raw)?,
            "output.dir" => self.output_dir = raw.to_string(),
            _ => self.set_task(key, raw)?,
        }
        Ok(())
    }

    fn set_task(&mut self, key: &str, raw: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or((key, ""));
        if section != self.task.name() {
            return Err(mismatch(key, &self.task));
        }
        match (&mut self.task, field) {
            (Task::Median(c), "set_size") => c.set_size = value(key, raw)?,
            (Task::Median(c), "families") => {
                c.families = raw
                    .split(',')
                    .map(|f| {
                        parse_family(f.trim())
                            .ok_or_else(|| Error::Config(format!("{key}: unknown family `{f}`")))
                    })
                    .collect::<Result<_>>()?
            }
            (Task::ClassCount(c), "set_size") => c.set_size = value(key, raw)?,
            (Task::ClassCount(c), "max_classes") => c.max_classes = value(key, raw)?,
            (Task::ClassCount(c), "dim") => c.dim = value(key, raw)?,
            (Task::ClassCount(c), "noise") => c.noise = value(key, raw)?,
            (Task::Linear(c), "set_size") => c.set_size = value(key, raw)?,
            (Task::Linear(c), "slope") => c.slope = value(key, raw)?,
            (Task::Linear(c), "intercept") => c.intercept = value(key, raw)?,
            _ => return Err(Error::Config(format!("{key}: unknown key"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match &self.task {
            Task::Median(c) if c.set_size == 0 || c.families.is_empty() => Err(Error::Config(
                "median.set_size and median.families must be non-empty".into(),
            )),
            Task::ClassCount(c) if c.set_size == 0 || c.max_classes == 0 || c.dim == 0 => {
                Err(Error::Config("classcount sizes must be positive".into()))
            }
            Task::Linear(c) if c.set_size == 0 => {
                Err(Error::Config("linear.set_size must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Key-value pairs in [`KEYS`] order, restricted to the active task section.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let mut out: Vec<(&'static str, String)> = vec![
            ("task", self.task.name().into()),
            ("model.aggregator", m.aggregator.name().into()),
            ("model.latent", m.latent.to_string()),
            ("model.encoder_hidden", m.encoder_hidden.to_string()),
            ("model.potential_hidden", m.potential_hidden.to_string()),
            ("model.potential_squares", m.potential_squares.to_string()),
            ("model.potential_blocks", m.potential_blocks.to_string()),
            ("model.readout_hidden", m.readout_hidden.to_string()),
            ("model.heads", m.heads.to_string()),
            ("inner.steps", m.inner_steps.to_string()),
            (
                "inner.aux_energy",
                match m.aux_energy {
                    AuxEnergy::Scaled => "scaled".into(),
                    AuxEnergy::Raw => "raw".into(),
                },
            ),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.w_aux", t.w_aux.to_string()),
            ("train.eval_period", t.eval_period.to_string()),
            ("train.eval_samples", t.eval_samples.to_string()),
            ("train.seed", t.seed.to_string()),
            (
                "train.clip",
                t.clip.map_or("none".into(), |c| c.to_string()),
            ),
            ("train.wall_clock", self.wall_clock.to_string()),
        ];
        match &self.task {
            Task::Median(c) => {
                out.push(("median.set_size", c.set_size.to_string()));
                let fams: Vec<String> = c.families.iter().map(|&f| family_name(f)).collect();
                out.push(("median.families", fams.join(",")));
            }
            Task::ClassCount(c) => {
                out.push(("classcount.set_size", c.set_size.to_string()));
                out.push(("classcount.max_classes", c.max_classes.to_string()));
                out.push(("classcount.dim", c.dim.to_string()));
                out.push(("classcount.noise", c.noise.to_string()));
            }
            Task::Linear(c) => {
                out.push(("linear.set_size", c.set_size.to_string()));
                out.push(("linear.slope", c.slope.to_string()));
                out.push(("linear.intercept", c.intercept.to_string()));
            }
        }
        out.push(("output.dir", self.output_dir.clone()));
        out
    }

    /// Text form accepted by [`RunConfig::parse`]. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn defaults_follow_task() {
        let c = RunConfig::parse("task = classcount\nmodel.aggregator = sum\n").unwrap();
        assert_eq!(c.model.aggregator, AggregatorKind::Sum);
        assert_eq!(c.model.potential_squares, 32);
        assert!(matches!(c.task, Task::ClassCount(_)));
    }

    #[test]
    fn unknown_key_names_the_key() {
        let e = RunConfig::parse("train.lrr = 0.1").unwrap_err();
        assert!(e.to_string().contains("train.lrr"), "{e}");
        let e = RunConfig::parse("classcount.dim = 3").unwrap_err();
        assert!(e.to_string().contains("classcount.dim"), "{e}");
    }

    #[test]
    fn bad_value_names_the_key() {
        let e = RunConfig::parse("train.steps = many").unwrap_err();
        assert!(e.to_string().contains("train.steps"), "{e}");
    }

    #[test]
    fn missing_equals_reports_line() {
        let e = RunConfig::parse("# c\n\nnonsense").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::parse_with("train.steps = 5", &[("train.steps".into(), "7".into())])
            .unwrap();
        assert_eq!(c.train.steps, 7);
    }

    #[test]
    fn clip_none_and_families() {
        let c =
            RunConfig::parse("train.clip = none\nmedian.families = uniform,constant:0.25").unwrap();
        assert_eq!(c.train.clip, None);
        let Task::Median(m) = &c.task else { panic!() };
        assert_eq!(
            m.families,
            vec![MedianFamily::Uniform, MedianFamily::Constant(0.25)]
        );
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn text_round_trip(
            task in prop::sample::select(vec!["median", "classcount", "linear"]),
            agg in prop::sample::select(vec!["equilibrium", "sum", "mean", "max", "attention", "pna"]),
            lr in 1e-6f64..1.0,
            w_aux in 0.0f64..10.0,
            steps in 0u64..1_000_000,
            seed in any::<u64>(),
            latent in 1usize..32,
            inner in 1usize..20,
            raw_aux in any::<bool>(),
        ) {
            let text = format!(
                "task = {task}\nmodel.aggregator = {agg}\ntrain.lr = {lr}\ntrain.w_aux = {w_aux}\n\
                 train.steps = {steps}\ntrain.seed = {seed}\nmodel.latent = {latent}\ninner.steps = {inner}\n\
                 inner.aux_energy = {}\n",
                if raw_aux { "raw" } else { "scaled" }
            );
            let a = RunConfig::parse(&text).unwrap();
            let b = RunConfig::parse(&a.to_text()).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.to_text(), b.to_text());
            prop_assert_eq!(a.train.lr.to_bits(), lr.to_bits());
        }
    }
}
