//! End-to-end tests of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn grafiti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grafiti"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn generate_small(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let csv = dir.join(name);
    let out = grafiti(&[
        "generate",
        "--out",
        csv.to_str().unwrap(),
        "--instances",
        "40",
        "--channels",
        "3",
        "--events-min",
        "10",
        "--events-max",
        "14",
        "--sparsity",
        "0.3",
        "--seed",
        seed,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    csv
}

#[test]
fn generate_is_deterministic_and_writes_sidecar_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_small(dir.path(), "a.csv", "11");
    let b = generate_small(dir.path(), "b.csv", "11");
    let c = generate_small(dir.path(), "c.csv", "12");
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(
        read(&dir.path().join("a.json")),
        read(&dir.path().join("b.json"))
    );
    let resolved = String::from_utf8(read(&dir.path().join("a.resolved.toml"))).unwrap();
    assert!(resolved.contains("seed = 11"));
    assert!(resolved.contains("sparsity = 0.3"));
}

#[test]
fn impossible_sparsity_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    let out = grafiti(&[
        "generate",
        "--out",
        csv.to_str().unwrap(),
        "--sparsity",
        "1.0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!csv.exists());
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    let out = grafiti(&["generate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stats_reports_the_generated_shape() {
    let dir = tempfile::tempdir().unwrap();
    let csv = generate_small(dir.path(), "d.csv", "3");
    let out = grafiti(&["stats", "--data", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sample_count"], 40);
    assert_eq!(v["channel_count"], 3);
    let s = v["sparsity_percent"].as_f64().unwrap();
    assert!(s > 10.0 && s < 50.0, "sparsity {s}");
}

#[test]
fn stats_on_a_malformed_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "instance,time,channel,value\n0,oops,0,1.0\n").unwrap();
    let out = grafiti(&["stats", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

fn train_small(csv: &Path, out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--no-search",
        "--layers",
        "1",
        "--heads",
        "1",
        "--hidden",
        "8",
        "--max-epochs",
        "2",
        "--folds",
        "2",
    ];
    args.extend_from_slice(extra);
    grafiti(&args)
}

#[test]
fn train_writes_report_model_curve_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let csv = generate_small(dir.path(), "t.csv", "5");
    let run = dir.path().join("run");
    let out = train_small(&csv, &run, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["label"], "grafiti");
    assert!(summary["test_mse_mean"].as_f64().unwrap().is_finite());

    let report: serde_json::Value =
        serde_json::from_slice(&read(&run.join("report.json"))).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);

    let curve = String::from_utf8(read(&run.join("loss_curve.csv"))).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("fold,epoch,train_mse,val_mse,lr"));
    assert_eq!(lines.count(), 4);

    let resolved = String::from_utf8(read(&run.join("resolved.toml"))).unwrap();
    assert!(resolved.contains("layers = 1"));
    assert!(resolved.contains("horizon = \"steps:3\""));
    assert!(run.join("model.json").exists());
}

#[test]
fn evaluate_reads_the_checkpoint_back() {
    let dir = tempfile::tempdir().unwrap();
    let csv = generate_small(dir.path(), "e.csv", "5");
    let run = dir.path().join("run");
    assert!(train_small(&csv, &run, &[]).status.success());

    let metrics_path = dir.path().join("metrics.json");
    let out = grafiti(&[
        "evaluate",
        "--checkpoint",
        run.join("model.json").to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--folds",
        "2",
        "--out",
        metrics_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mse_per_fold"].as_array().unwrap().len(), 2);
    assert!(v["baseline_carry_forward_mean"].as_f64().unwrap() > 0.0);
    assert_eq!(read(&metrics_path), out.stdout[..out.stdout.len() - 1]);
}

#[test]
fn evaluate_rejects_a_dataset_with_a_different_channel_count() {
    let dir = tempfile::tempdir().unwrap();
    let csv = generate_small(dir.path(), "f.csv", "5");
    let run = dir.path().join("run");
    assert!(train_small(&csv, &run, &[]).status.success());

    let other = dir.path().join("wide.csv");
    let out = grafiti(&[
        "generate",
        "--out",
        other.to_str().unwrap(),
        "--instances",
        "40",
        "--channels",
        "4",
        "--seed",
        "5",
    ]);
    assert!(out.status.success());
    let out = grafiti(&[
        "evaluate",
        "--checkpoint",
        run.join("model.json").to_str().unwrap(),
        "--data",
        other.to_str().unwrap(),
        "--folds",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channels"));
}

#[test]
fn resuming_a_finished_run_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = generate_small(dir.path(), "r.csv", "5");
    let run = dir.path().join("run");
    assert!(train_small(&csv, &run, &[]).status.success());
    let first = read(&run.join("report.json"));
    let out = train_small(&csv, &run, &["--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(first, read(&run.join("report.json")));
}

#[test]
fn resume_without_no_search_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = generate_small(dir.path(), "s.csv", "5");
    let out = grafiti(&[
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
        "--resume",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablation_training_is_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let csv = generate_small(dir.path(), "g.csv", "5");
    let run = dir.path().join("run");
    let out = train_small(&csv, &run, &["--ablation", "no-target-edges"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["label"], "grafiti-no-target-edges");
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "instances = 25\nchannels = 4\nseed = 9\n").unwrap();
    let csv = dir.path().join("h.csv");
    let out = grafiti(&[
        "generate",
        "--out",
        csv.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--channels",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = grafiti(&["stats", "--data", csv.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["sample_count"], 25);
    assert_eq!(v["channel_count"], 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = grafiti(&[
        "generate",
        "--out",
        csv.to_str().unwrap(),
        "--config",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_writes_a_scaling_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_csv = dir.path().join("bench.csv");
    let out = grafiti(&[
        "benchmark",
        "--events",
        "6,12",
        "--batch-size",
        "3",
        "--reps",
        "1",
        "--out",
        out_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(read(&out_csv)).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("events,edges,forward_seconds,forward_backward_seconds")
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1][1] > rows[0][1], "edge counts should grow");
}
