use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use equiagg::config::{parse_override, RunConfig};
use equiagg::report::{load_runs, summary, write_csv};
use equiagg::run::{output_root, parse_axis, run_dir, run_training, sweep_points, RunOutcome};
use equiagg::verify::{run_suite, Suite};
use equiagg::Error;

/// Exit status for bad arguments or configuration.
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "equiagg",
    version,
    about = "Equilibrium Aggregation experiments and oracle checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand for `--set task=...`.
    #[arg(long)]
    task: Option<String>,
    /// Shorthand for `--set model.aggregator=...`.
    #[arg(long)]
    agg: Option<String>,
    /// Shorthand for `--set train.steps=...`.
    #[arg(long)]
    steps: Option<u64>,
    /// Shorthand for `--set train.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> equiagg::Result<RunConfig> {
        let mut pairs = Vec::new();
        for (k, v) in [("task", &self.task), ("model.aggregator", &self.agg)] {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        for (k, v) in [("train.steps", self.steps), ("train.seed", self.seed)] {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.to_string()));
            }
        }
        for o in &self.overrides {
            pairs.push(parse_override(o)?);
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &pairs),
            None => RunConfig::parse_with("", &pairs),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `$EQUIAGG_OUT/<task>-<agg>-s<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run an oracle suite: table1, attention, map, universality, gradcheck,
    /// invariance or all.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate the metrics of run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train every point of the cartesian product of `--sweep` axes.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Axis `key=v1,v2,...`; repeatable.
        #[arg(long = "sweep", value_name = "KEY=V1,V2", required = true)]
        axes: Vec<String>,
        /// Parent of the point directories; defaults to `$EQUIAGG_OUT/sweep`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train points on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

fn usage(e: Error) -> ExitCode {
    eprintln!("usage error: {e}");
    ExitCode::from(USAGE)
}

fn report_outcome(dir: &std::path::Path, outcome: equiagg::Result<RunOutcome>) -> bool {
    match outcome {
        Ok(RunOutcome::Completed { metrics }) => {
            match metrics.last() {
                Some(m) => println!(
                    "{}: step {} metric {:.6e}",
                    dir.display(),
                    m.step,
                    m.task_metric
                ),
                None => println!("{}: no steps run", dir.display()),
            }
            true
        }
        Ok(RunOutcome::Diverged { step, error, dump }) => {
            eprintln!("{}: diverged at step {step}: {error}", dir.display());
            eprintln!("diagnostic dump: {}", dump.display());
            false
        }
        Err(e) => {
            eprintln!("{}: {e}", dir.display());
            false
        }
    }
}

fn cmd_train(cfg: ConfigArgs, out: Option<PathBuf>, resume: bool) -> ExitCode {
    let mut config = match cfg.load() {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    if let Some(o) = out {
        config.output_dir = o.display().to_string();
    }
    let dir = run_dir(&config, &output_root());
    if report_outcome(&dir, run_training(&config, &dir, resume)) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_verify(suite: &str, seed: u64) -> ExitCode {
    let suites = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        match Suite::parse(suite) {
            Ok(s) => vec![s],
            Err(e) => return usage(e),
        }
    };
    let mut ok = true;
    for s in suites {
        match run_suite(s, seed) {
            Ok(checks) => {
                for c in checks {
                    println!("{c}");
                    ok &= c.passed;
                }
            }
            Err(e) => {
                println!("FAIL {}: {e}", s.name());
                ok = false;
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_report(dirs: &[PathBuf], csv: Option<PathBuf>) -> ExitCode {
    let runs = match load_runs(dirs) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    let written = match &csv {
        Some(path) => std::fs::File::create(path)
            .map_err(Error::from)
            .and_then(|f| write_csv(&runs, f)),
        None => write_csv(&runs, std::io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("{e}");
        return ExitCode::FAILURE;
    }
    if csv.is_some() {
        print!("{}", summary(&runs));
    } else {
        eprint!("{}", summary(&runs));
    }
    ExitCode::SUCCESS
}

fn cmd_sweep(cfg: ConfigArgs, axes: &[String], out: Option<PathBuf>, parallel: bool) -> ExitCode {
    let points = cfg.load().and_then(|base| {
        let axes = axes
            .iter()
            .map(|a| parse_axis(a))
            .collect::<equiagg::Result<Vec<_>>>()?;
        sweep_points(&base, &axes)
    });
    let points = match points {
        Ok(p) => p,
        Err(e) => return usage(e),
    };
    let parent = out.unwrap_or_else(|| output_root().join("sweep"));
    let run = |(name, config): &(String, RunConfig)| {
        let dir = parent.join(name);
        report_outcome(&dir, run_training(config, &dir, false))
    };
    let ok = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = points.iter().map(|p| s.spawn(move || run(p))).collect();
            handles.into_iter().all(|h| h.join().unwrap_or(false))
        })
    } else {
        points.iter().map(run).fold(true, |a, b| a & b)
    };
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Train { cfg, out, resume } => cmd_train(cfg, out, resume),
        Command::Verify { suite, seed } => cmd_verify(&suite, seed),
        Command::Report { dirs, csv } => cmd_report(&dirs, csv),
        Command::Sweep {
            cfg,
            axes,
            out,
            parallel,
        } => cmd_sweep(cfg, &axes, out, parallel),
    }
}
