//! End-to-end tests of the binary: exit codes, artifact layout, output
//! formats, and run-to-run determinism.

use std::path::Path;
use std::process::{Command, Output};

use effnetv2::trainer::Metrics;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effnetv2")).args(args).output().expect("spawn binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small end-to-end run config: 4-class synthetic data, the `tiny` preset,
/// four training steps.
fn desk_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "arch": "tiny",
  "seed": {seed},
  "train": {{ "epochs": 2, "batch_size": 16, "warmup_epochs": 0.5 }},
  "schedule": {{
    "total_steps": 4,
    "num_stages": 2,
    "size_min": 16,
    "size_max": 24,
    "reg_min": {{ "dropout": 0.0, "randaug": 0.0, "mixup": 0.0 }},
    "reg_max": {{ "dropout": 0.1, "randaug": 3.0, "mixup": 0.0 }}
  }},
  "synthetic": {{ "num_classes": 4, "train": 32, "eval": 8, "image_size": 16, "snr": 4.0 }}
}}"#
    );
    let path = dir.join("run.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(exit_code(&run(&["--help"])), 0);
    assert_eq!(exit_code(&run(&["--version"])), 0);
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(exit_code(&run(&[])), 1);
}

#[test]
fn unknown_arch_is_a_validation_error() {
    let out = run(&["inspect", "nosuchmodel"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("neither a preset"), "{}", stderr(&out));
}

#[test]
fn inspect_prints_the_stage_table() {
    let out = run(&["inspect", "v2-s"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("stage"), "{text}");
    assert!(text.contains("fused_mbconv4, k3x3"), "{text}");
    assert!(text.contains("mbconv6, k3x3, se0.25"), "{text}");
    assert!(text.contains("conv1x1 + pool + fc"), "{text}");
    assert!(text.contains("default image size: 384"), "{text}");
}

#[test]
fn inspect_json_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(&["inspect", "v2-s", "--json"]);
    assert_eq!(exit_code(&first), 0);
    let path = dir.path().join("arch.json");
    std::fs::write(&path, stdout(&first)).unwrap();
    let second = run(&["inspect", path.to_str().unwrap(), "--json"]);
    assert_eq!(exit_code(&second), 0);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn malformed_arch_file_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{ \"stem\": ").unwrap();
    let out = run(&["inspect", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("line") && err.contains("column"), "{err}");
}

#[test]
fn count_json_totals_match_text_totals() {
    let text_out = run(&["count", "v2-s", "--image-size", "384"]);
    assert_eq!(exit_code(&text_out), 0);
    let text = stdout(&text_out);
    let total_line = text.lines().find(|l| l.starts_with("total:")).expect("total line");

    let json_out = run(&["count", "v2-s", "--image-size", "384", "--json"]);
    assert_eq!(exit_code(&json_out), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&json_out)).unwrap();
    let params = report["total_params"].as_u64().unwrap();
    let flops = report["total_flops"].as_u64().unwrap();
    assert!(total_line.contains(&params.to_string()), "{total_line} vs {params}");
    assert!(total_line.contains(&flops.to_string()), "{total_line} vs {flops}");
}

#[test]
fn schedule_preset_resolves_the_published_ramp() {
    let out = run(&["schedule", "--preset", "v2-s", "--stages", "4", "--total-steps", "1000"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    for size in ["128", "184", "240", "300"] {
        assert!(text.contains(size), "missing size {size} in:\n{text}");
    }

    let json = run(&["schedule", "--preset", "v2-s", "--stages", "4", "--total-steps", "1000", "--json"]);
    let plans: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    let sizes: Vec<u64> =
        plans.as_array().unwrap().iter().map(|p| p["image_size"].as_u64().unwrap()).collect();
    assert_eq!(sizes, vec![128, 184, 240, 300]);
}

#[test]
fn schedule_requires_exactly_one_source() {
    assert_eq!(exit_code(&run(&["schedule"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), 0);
    let both = run(&["schedule", "--preset", "v2-s", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&both), 1);
}

#[test]
fn train_writes_artifacts_and_repeats_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), 7);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let res = run(&["train", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
        assert_eq!(exit_code(&res), 0, "stderr: {}", stderr(&res));
        assert!(out.join("metrics.csv").is_file());
        assert!(out.join("summary.json").is_file());
        assert!(out.join("step-00000004.efv2").is_file());
    }
    let a = Metrics::read_csv(&out1.join("metrics.csv")).unwrap();
    let b = Metrics::read_csv(&out2.join("metrics.csv")).unwrap();
    assert_eq!(a.rows.len(), 4);
    assert!(a.deterministic_eq(&b), "reruns disagree beyond wall-clock columns");
}

#[test]
fn train_seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), 7);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    let r1 = run(&["train", "--config", cfg.to_str().unwrap(), "--output", out1.to_str().unwrap()]);
    let r2 = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--seed", "8", "--output", out2.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&r1), 0);
    assert_eq!(exit_code(&r2), 0);
    let a = Metrics::read_csv(&out1.join("metrics.csv")).unwrap();
    let b = Metrics::read_csv(&out2.join("metrics.csv")).unwrap();
    assert!(!a.deterministic_eq(&b), "different seeds produced identical runs");
}

#[test]
fn config_validation_reports_every_problem_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{
  "arch": "tiny",
  "train": { "epochs": 0, "batch_size": 0 },
  "schedule": {
    "total_steps": 0,
    "num_stages": 2,
    "size_min": 40,
    "size_max": 32,
    "reg_min": { "dropout": 0.0, "randaug": 0.0, "mixup": 0.0 },
    "reg_max": { "dropout": 0.1, "randaug": 3.0, "mixup": 0.0 }
  }
}"#,
    )
    .unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("epochs"), "{err}");
    assert!(err.contains("batch_size"), "{err}");
    assert!(err.contains("total_steps"), "{err}");
    assert!(err.contains("size_min"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    std::fs::write(&path, r#"{ "arch": "tiny", "outptu_dir": "x" }"#).unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("unknown field"), "{}", stderr(&out));
}

#[test]
fn nas_budget_one_yields_single_candidate_front() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("search");
    let out = run(&[
        "nas",
        "--budget", "1",
        "--seed", "5",
        "--epochs", "1",
        "--image-size", "32",
        "--batch-size", "8",
        "--train-images", "32",
        "--eval-images", "8",
        "--output", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let trace = std::fs::read_to_string(out_dir.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("pareto.json")).unwrap()).unwrap();
    assert_eq!(summary["pareto_indices"], serde_json::json!([0]));
    assert!(summary["best"]["reward"].is_number(), "{summary}");
}

#[test]
fn export_round_trips_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), 3);
    let out_dir = dir.path().join("run");
    let res = run(&["train", "--config", cfg.to_str().unwrap(), "--output", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&res), 0, "stderr: {}", stderr(&res));
    let metrics_path = out_dir.join("metrics.csv");

    let json = run(&["export", "--metrics", metrics_path.to_str().unwrap(), "--format", "json"]);
    assert_eq!(exit_code(&json), 0);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);

    let copy = dir.path().join("copy.csv");
    let csv = run(&[
        "export", "--metrics", metrics_path.to_str().unwrap(), "--format", "csv", "--out",
        copy.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&csv), 0);
    let original = Metrics::read_csv(&metrics_path).unwrap();
    let exported = Metrics::read_csv(&copy).unwrap();
    assert_eq!(original, exported);

    let no_out = run(&["export", "--metrics", metrics_path.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(exit_code(&no_out), 1);
}

#[test]
fn env_var_sets_the_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), 1);
    let out_dir = dir.path().join("from-env");
    let res = Command::new(env!("CARGO_BIN_EXE_effnetv2"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("EFFNETV2_OUTPUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(exit_code(&res), 0, "stderr: {}", stderr(&res));
    assert!(out_dir.join("metrics.csv").is_file());
}
