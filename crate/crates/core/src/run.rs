//! Run directories: config snapshot, metrics stream, checkpoint and
//! divergence dump.

use std::cell::RefCell;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::build_model;
use crate::training::{train_from, MetricsRecord, RunState, TrainEvent};

pub const OUT_ENV: &str = "EQUIAGG_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIVERGED_FILE: &str = "diverged.json";
pub const DIVERGED_CHECKPOINT: &str = "diverged.bin";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

pub fn default_run_name(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-s{}",
        cfg.task.name(),
        cfg.model.aggregator.name(),
        cfg.train.seed
    )
}

/// `output.dir` when set, otherwise a name derived from the config under `root`.
pub fn run_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    if cfg.output_dir.is_empty() {
        root.join(default_run_name(cfg))
    } else {
        PathBuf::from(&cfg.output_dir)
    }
}

/// Contents of the divergence dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Outer step that failed; the dumped parameters precede it.
    pub step: u64,
    pub error: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone)]
pub enum RunOutcome {
    Completed {
        metrics: Vec<MetricsRecord>,
    },
    Diverged {
        step: u64,
        error: String,
        dump: PathBuf,
    },
}

fn append_line(file: &mut File, rec: &MetricsRecord) -> Result<()> {
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}

/// Trains `cfg` in `dir`. A fresh run truncates the metrics stream and
/// writes the initial checkpoint; `resume` continues the state saved in
/// `dir` and appends.
pub fn run_training(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let model = build_model(&cfg.task, &cfg.model)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let state = if resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.config.task != cfg.task
            || ck.config.model != cfg.model
            || ck.config.train.seed != cfg.train.seed
        {
            return Err(Error::Config(
                "resume config differs from the checkpoint in task, model or seed".into(),
            ));
        }
        ck.state
    } else {
        RunState::fresh(&model, cfg.train.seed)
    };
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    let mut metrics_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(dir.join(METRICS_FILE))?;
    if !resume {
        Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
        }
        .save(&ckpt_path)?;
    }

    let dump: RefCell<Option<(u64, String, PathBuf)>> = RefCell::new(None);
    let result = train_from(
        &model,
        &cfg.task,
        &cfg.train,
        state,
        cfg.wall_clock,
        |event| match event {
            TrainEvent::Eval { record, state } => {
                append_line(&mut metrics_file, record)?;
                Checkpoint {
                    config: cfg.clone(),
                    state: state.clone(),
                }
                .save(&ckpt_path)
            }
            TrainEvent::Diverged { step, error, state } => {
                let bin = dir.join(DIVERGED_CHECKPOINT);
                Checkpoint {
                    config: cfg.clone(),
                    state: state.clone(),
                }
                .save(&bin)?;
                let report = DivergenceReport {
                    step,
                    error: error.to_string(),
                    checkpoint: bin.display().to_string(),
                };
                let path = dir.join(DIVERGED_FILE);
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
                *dump.borrow_mut() = Some((step, report.error, path));
                Ok(())
            }
        },
    );
    match (result, dump.into_inner()) {
        (Ok(outcome), _) => Ok(RunOutcome::Completed {
            metrics: outcome.metrics,
        }),
        (Err(_), Some((step, error, dump))) => Ok(RunOutcome::Diverged { step, error, dump }),
        (Err(e), None) => Err(e),
    }
}

/// Cartesian product of sweep axes applied to `base`. Each point is named
/// by its assignments, e.g. `train.lr=0.001,inner.steps=5`.
pub fn sweep_points(
    base: &RunConfig,
    axes: &[(String, Vec<String>)],
) -> Result<Vec<(String, RunConfig)>> {
    if axes.iter().any(|(_, vs)| vs.is_empty()) {
        return Err(Error::Config("sweep axis without values".into()));
    }
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let base_pairs = base.to_pairs();
    points
        .into_iter()
        .map(|assign| {
            let name = assign
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",");
            let mut pairs: Vec<(&str, &str)> = base_pairs
                .iter()
                .filter(|(k, _)| *k != "output.dir")
                .map(|(k, v)| (*k, v.as_str()))
                .collect();
            pairs.extend(assign.iter().map(|(k, v)| (k.as_str(), v.as_str())));
            Ok((name, RunConfig::from_pairs(pairs)?))
        })
        .collect()
}

/// Parses `key=v1,v2,...`.
pub fn parse_axis(s: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=v1,v2,..., got `{s}`")))?;
    Ok((
        k.trim().to_string(),
        vs.split(',').map(|v| v.trim().to_string()).collect(),
    ))
}
