use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_equiagg");

fn run(args: &[&str], out_root: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("EQUIAGG_OUT", out_root)
        .output()
        .expect("spawn equiagg")
}

fn small(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "--set",
        "median.set_size=6",
        "--set",
        "train.batch_size=2",
        "--set",
        "train.eval_period=2",
        "--set",
        "train.eval_samples=3",
        "--set",
        "model.latent=2",
        "--set",
        "model.encoder_hidden=4",
        "--set",
        "model.potential_hidden=4",
        "--set",
        "model.readout_hidden=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn args<'a>(head: &[&'a str], tail: &'a [String]) -> Vec<&'a str> {
    head.iter()
        .copied()
        .chain(tail.iter().map(String::as_str))
        .collect()
}

#[test]
fn zero_step_train_writes_empty_metrics_and_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "train",
            "--task",
            "median",
            "--agg",
            "equilibrium",
            "--steps",
            "0",
        ],
        root.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = root.path().join("median-equilibrium-s0");
    assert_eq!(
        std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap(),
        ""
    );
    assert!(dir.join("checkpoint.bin").exists());
    assert!(dir.join("config.txt").exists());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let root = tempfile::tempdir().unwrap();
    let tail = small(&["--set", "train.wall_clock=false"]);
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let dir = root.path().join(name);
        let d = dir.to_str().unwrap();
        let a = args(
            &[
                "train", "--task", "median", "--agg", "ea", "--steps", "4", "--out", d,
            ],
            &tail,
        );
        let out = run(&a, root.path());
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        files.push(std::fs::read(dir.join("metrics.jsonl")).unwrap());
    }
    assert!(!files[0].is_empty());
    assert_eq!(files[0], files[1]);
}

#[test]
fn report_compares_two_runs() {
    let root = tempfile::tempdir().unwrap();
    let tail = small(&[]);
    for agg in ["sum", "equilibrium"] {
        let a = args(
            &["train", "--task", "median", "--agg", agg, "--steps", "4"],
            &tail,
        );
        let out = run(&a, root.path());
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let (s, e) = (
        root.path().join("median-sum-s0"),
        root.path().join("median-equilibrium-s0"),
    );
    let csv = root.path().join("report.csv");
    let out = run(
        &[
            "report",
            s.to_str().unwrap(),
            e.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ],
        root.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("run,step,metric,aux,grad_maxnorm\n"));
    assert!(text.contains("median-sum-s0,") && text.contains("median-equilibrium-s0,"));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("best"));
}

#[test]
fn report_on_empty_dir_fails() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["report", root.path().to_str().unwrap()], root.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse error"));
}

#[test]
fn bad_config_key_is_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.txt");
    std::fs::write(&cfg, "task = median\ntrain.learning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()], root.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
}

#[test]
fn verify_reports_each_check() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["verify", "universality"], root.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.starts_with("PASS")).count(),
        3,
        "{text}"
    );
    let out = run(&["verify", "nope"], root.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_attention_exits_nonzero() {
    let root = tempfile::tempdir().unwrap();
    let out = run(&["verify", "attention"], root.path());
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("FAIL attention y_r/y_s") && text.contains("PASS attention y_r vs"),
        "{text}"
    );
}

#[test]
fn sweep_makes_one_directory_per_point() {
    let root = tempfile::tempdir().unwrap();
    let tail = small(&[
        "--sweep",
        "train.lr=1e-4,1e-3",
        "--sweep",
        "inner.steps=1,2",
    ]);
    let a = args(
        &["sweep", "--task", "median", "--agg", "ea", "--steps", "2"],
        &tail,
    );
    let out = run(&a, root.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut names: Vec<String> = std::fs::read_dir(root.path().join("sweep"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "train.lr=1e-3,inner.steps=1",
            "train.lr=1e-3,inner.steps=2",
            "train.lr=1e-4,inner.steps=1",
            "train.lr=1e-4,inner.steps=2"
        ]
    );
}

#[test]
fn divergence_exits_nonzero_with_dump() {
    let root = tempfile::tempdir().unwrap();
    let tail = small(&["--set", "train.lr=1e300", "--set", "train.clip=none"]);
    let a = args(
        &["train", "--task", "median", "--agg", "ea", "--steps", "6"],
        &tail,
    );
    let out = run(&a, root.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diagnostic dump:"), "{err}");
    let dir = root.path().join("median-equilibrium-s0");
    assert!(dir.join("diverged.json").exists() && dir.join("diverged.bin").exists());
}
