//! Metrics files of run directories rendered as one CSV and a summary table.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::run::{CONFIG_FILE, METRICS_FILE};
use crate::training::MetricsRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    /// Higher is better (accuracy) when true, lower (MSE) otherwise.
    pub maximize: bool,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub step: u64,
    pub metric: f64,
    pub aux: Option<f64>,
    pub grad_maxnorm: Option<f64>,
}

/// Parses a metrics stream; errors carry the 1-based line number.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_run(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("{}: {e}", path.display()),
    })?;
    let records = parse_metrics(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })?;
    if records.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{}: no metrics rows", path.display()),
        });
    }
    let maximize = RunConfig::load(&dir.join(CONFIG_FILE), &[])
        .map(|c| c.task.num_classes().is_some())
        .unwrap_or(false);
    Ok(RunMetrics {
        label: run_label(dir),
        maximize,
        records,
    })
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn rows(runs: &[RunMetrics]) -> Vec<ReportRow> {
    runs.iter()
        .flat_map(|r| {
            r.records.iter().map(|m| ReportRow {
                run: r.label.clone(),
                step: m.step,
                metric: m.task_metric,
                aux: m.aux_loss_mean,
                grad_maxnorm: m.final_grad_maxnorm_mean,
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(runs: &[RunMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows(runs) {
        w.serialize(row)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

impl RunMetrics {
    pub fn final_metric(&self) -> f64 {
        self.records.last().expect("non-empty run").task_metric
    }

    /// Best eval metric and the step it was reached at.
    pub fn best(&self) -> (u64, f64) {
        let better = |a: f64, b: f64| if self.maximize { a > b } else { a < b };
        let mut best = (self.records[0].step, self.records[0].task_metric);
        for r in &self.records[1..] {
            if better(r.task_metric, best.1) {
                best = (r.step, r.task_metric);
            }
        }
        best
    }
}

pub fn summary(runs: &[RunMetrics]) -> String {
    let width = runs.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    let mut s = format!(
        "{:<width$}  {:>10}  {:>12}  {:>12}  {:>10}\n",
        "run", "steps", "final", "best", "best step"
    );
    for r in runs {
        let (step, best) = r.best();
        let last = r.records.last().expect("non-empty run").step;
        writeln!(
            s,
            "{:<width$}  {:>10}  {:>12.5e}  {:>12.5e}  {:>10}",
            r.label,
            last,
            r.final_metric(),
            best,
            step
        )
        .expect("write to string");
    }
    s
}

pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<RunMetrics>> {
    if dirs.is_empty() {
        return Err(Error::Config(
            "report needs at least one run directory".into(),
        ));
    }
    dirs.iter().map(|d| load_run(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, m: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            task_metric: m,
            aux_loss_mean: Some(0.5),
            final_grad_maxnorm_mean: None,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn bad_line_reports_number() {
        let good = serde_json::to_string(&rec(1, 0.1)).unwrap();
        let text = format!("{good}\n{good}\n{{\"step\": 3\n");
        assert!(matches!(
            parse_metrics(&text),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn best_depends_on_direction() {
        let mut r = RunMetrics {
            label: "a".into(),
            maximize: false,
            records: vec![rec(1, 0.3), rec(2, 0.1), rec(3, 0.2)],
        };
        assert_eq!(r.best(), (2, 0.1));
        r.maximize = true;
        assert_eq!(r.best(), (1, 0.3));
    }

    #[test]
    fn csv_has_header_and_blank_missing_values() {
        let r = RunMetrics {
            label: "x".into(),
            maximize: false,
            records: vec![rec(5, 0.25)],
        };
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "run,step,metric,aux,grad_maxnorm\nx,5,0.25,0.5,\n"
        );
    }

    #[test]
    fn empty_dir_is_parse_error() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(load_run(d.path()), Err(Error::Parse { .. })));
    }
}
