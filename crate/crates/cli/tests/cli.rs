use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn normopt(args: &[&str], outdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normopt"))
        .args(args)
        .env("NORMOPT_OUTDIR", outdir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}

const TINY: &[&str] = &[
    "--set", "model.layers=1",
    "--set", "model.hidden=16",
    "--set", "model.heads=2",
    "--set", "model.kv_heads=1",
    "--set", "model.intermediate=32",
    "--set", "model.seq_len=16",
    "--set", "optim.adamw.lr=0.003",
    "--set", "train.steps=12",
    "--set", "train.warmup=2",
    "--set", "train.micro_batch=2",
    "--set", "train.grad_accum=1",
    "--set", "train.eval_every=6",
    "--set", "train.eval_tokens=128",
    "--set", "train.diag_every=4",
];

fn corpus(dir: &Path) -> String {
    let p = dir.join("corpus.txt");
    fs::write(&p, normopt::corpus::synthetic_text(3, 40_000)).unwrap();
    p.display().to_string()
}

fn tiny_args<'a>(cmd: &'a str, corpus: &'a str) -> Vec<&'a str> {
    let mut args = vec![cmd, "--corpus", corpus];
    args.extend_from_slice(TINY);
    args
}

#[test]
fn factorial_dry_run_lists_eighteen_runs() {
    let tmp = TempDir::new().unwrap();
    let plan = stdout_json(&normopt(&["factorial", "--dry-run"], tmp.path()));
    let runs = plan.as_array().unwrap();
    assert_eq!(runs.len(), 18);
    let ids: std::collections::HashSet<_> = runs.iter().map(|r| r["run_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 18);
    assert!(fs::read_dir(tmp.path()).unwrap().next().is_none());
}

#[test]
fn lambda_sweep_dry_run_uses_standard_grid() {
    let tmp = TempDir::new().unwrap();
    let plan = stdout_json(&normopt(&["sweep", "--kind", "lambda", "--dry-run"], tmp.path()));
    let runs = plan.as_array().unwrap();
    let values: Vec<f64> = runs
        .iter()
        .filter(|r| !r["reference"].as_bool().unwrap())
        .map(|r| r["value"].as_f64().unwrap())
        .collect();
    assert_eq!(values, vec![0.0, 0.5, 0.7, 0.9, 1.0]);
    assert_eq!(runs.iter().filter(|r| r["label"] == "rmsnorm").count(), 1);
    assert!(runs.iter().all(|r| r["optimizer"] == "muon"));
}

#[test]
fn tpcost_prints_allreduce_counts() {
    let tmp = TempDir::new().unwrap();
    let t = stdout_json(&normopt(&["tpcost", "--format", "json"], tmp.path()));
    let counts: Vec<u64> = t["rows"].as_array().unwrap().iter().map(|r| r["allreduces"].as_u64().unwrap()).collect();
    assert_eq!(counts, vec![4224, 33, 0, 0]);
    assert_eq!(t["label"], "model, not measurement");

    let out = tmp.path().join("tp");
    let o = normopt(&["tpcost", "--out", out.to_str().unwrap()], tmp.path());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("model, not measurement") && text.contains("4224"));
    assert_eq!(fs::read_to_string(out.join("tpcost.csv")).unwrap().lines().count(), 5);
}

#[test]
fn usage_errors_are_json_with_exit_two() {
    let tmp = TempDir::new().unwrap();
    let o = normopt(&["train", "--no-such-flag"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["kind"], "usage");

    let o = normopt(&["train", "--set", "norm.lambda=3"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_error(&o);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("lambda"));

    assert!(normopt(&["--help"], tmp.path()).status.success());
}

#[test]
fn train_then_report_data() {
    let tmp = TempDir::new().unwrap();
    let c = corpus(tmp.path());
    let runs = tmp.path().join("runs");
    let summary = stdout_json(&normopt(&tiny_args("train", &c), &runs));
    assert_eq!(summary["status"], "completed");
    let run_dir = runs.join(summary["run_id"].as_str().unwrap());

    // the echoed config reproduces the same run identity
    let echoed = run_dir.join("config.toml");
    let again = normopt(&["train", "--config", echoed.to_str().unwrap(), "--resume"], &runs);
    assert_eq!(stdout_json(&again)["run_id"], summary["run_id"]);

    let o = normopt(&tiny_args("train", &c), &runs);
    assert_eq!(stderr_error(&o)["kind"], "occupied");
    let mut forced = tiny_args("train", &c);
    forced.push("--force");
    assert!(normopt(&forced, &runs).status.success());

    let index = stdout_json(&normopt(&["report-data"], &runs));
    assert_eq!(index["runs"], 1);
    let data: Value = serde_json::from_str(&fs::read_to_string(runs.join("report_data.json")).unwrap()).unwrap();
    assert_eq!(data["schemas"]["version"], 1);
    assert_eq!(data["runs"][0]["metrics_rows"], 12);
    assert_eq!(data["runs"][0]["diagnostics_rows"], 3 * 3);

    fs::write(run_dir.join("metrics.csv"), "step,loss\n0,1\n").unwrap();
    let o = normopt(&["report-data"], &runs);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_error(&o);
    assert_eq!(e["kind"], "schema");
    assert!(e["details"][0]["file"].as_str().unwrap().ends_with("metrics.csv"));
}

#[test]
fn factorial_writes_report_files() {
    let tmp = TempDir::new().unwrap();
    let c = corpus(tmp.path());
    let out = tmp.path().join("fact");
    let mut args = tiny_args("factorial", &c);
    args.extend_from_slice(&["--norms", "rmsnorm,derf", "--seeds", "1,2", "--bootstrap", "200", "--jobs", "2"]);
    let report = stdout_json(&normopt(&args, &out));
    assert_eq!(report["complete"], true);
    assert_eq!(report["gaps"].as_array().unwrap().len(), 2);
    assert!(report["interactions"][0]["ci"]["lo"].is_number());
    assert!(out.join("factorial_runs.json").exists());
    // a second invocation needs --resume and then reuses every finished run
    assert_eq!(stderr_error(&normopt(&args, &out))["kind"], "occupied");
    args.push("--resume");
    assert_eq!(stdout_json(&normopt(&args, &out)), report);
}
