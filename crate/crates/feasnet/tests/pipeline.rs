//! End-to-end command-line flows against a temporary directory: artifact
//! layout, determinism, exit codes, and guard rails.

use std::path::Path;

use clap::Parser;
use feasnet::cli::{run_to_exit, Cli};

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["feasnet"];
    full.extend_from_slice(args);
    run_to_exit(&Cli::parse_from(full))
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        r#"{
            "family": {"kind": "qp", "variant": "convex", "n": 4, "n_eq": 2, "n_ineq": 1, "seed": 5},
            "dataset": {"train": 12, "val": 4, "test": 6, "seed": 6},
            "fs": {"max_iters": 30, "tracked_iters": 5},
            "train": {"epochs": 2, "batch_size": 6, "seed": 7},
            "eval": {"k_list": [0, 3], "rho_list": [0.0, 5.0]}
        }"#,
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn full_pipeline_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.display().to_string();

    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "generate"]), 0);
    assert!(out.join("family/family.json").is_file());
    assert!(out.join("dataset/manifest.json").is_file());
    assert!(out.join("dataset/x.f64").is_file());
    assert!(out.join("dataset/interior.f64").is_file());
    assert!(out.join("dataset/splits.json").is_file());

    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "oracle"]), 0);
    assert!(out.join("oracle/val/oracle.json").is_file());
    assert!(out.join("oracle/test/oracle.f64").is_file());

    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "train"]), 0);
    assert!(out.join("model/model.json").is_file());
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3, "one header plus one row per epoch");

    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "eval"]), 0);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,seed,eq_mean,eq_max,ineq_mean,ineq_max,gap_mean,gap_min,gap_max,batch_s,sequential_s"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("fsnet,7,"));
    let per_instance = std::fs::read_to_string(out.join("per_instance.csv")).unwrap();
    assert_eq!(per_instance.lines().count(), 7, "header plus one row per test instance");
}

#[test]
fn sweeps_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_s = dir.path().join("run").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "generate"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "oracle"]), 0);

    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "sweep-k"]), 0);
    let table = std::fs::read_to_string(dir.path().join("run/sweep_k.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("k0,"));
    assert!(table.contains("k3,"));

    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "sweep-rho"]), 0);
    let table = std::fs::read_to_string(dir.path().join("run/sweep_rho.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "rho,mean_dist,mean_gap,mean_viol");
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn regenerated_artifacts_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out-dir", &a, "generate"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &b, "generate"]), 0);
    for file in ["dataset/x.f64", "dataset/interior.f64", "family/A.f64"] {
        let ba = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let bb = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(ba, bb, "{file} differs between identical runs");
    }
}

#[test]
fn seed_flag_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    let c = dir.path().join("c").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out-dir", &a, "--seed", "11", "generate"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &b, "--seed", "11", "generate"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &c, "--seed", "12", "generate"]), 0);
    let xa = std::fs::read(dir.path().join("a/dataset/x.f64")).unwrap();
    let xb = std::fs::read(dir.path().join("b/dataset/x.f64")).unwrap();
    let xc = std::fs::read(dir.path().join("c/dataset/x.f64")).unwrap();
    assert_eq!(xa, xb);
    assert_ne!(xa, xc);
}

#[test]
fn eval_before_oracle_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_s = dir.path().join("run").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "generate"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "train"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "eval"]), 2);
}

#[test]
fn train_before_generate_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_s = dir.path().join("run").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "train"]), 2);
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_s = dir.path().join("run").display().to_string();

    let missing = dir.path().join("absent.json").display().to_string();
    assert_eq!(run(&["--config", &missing, "--out-dir", &out_s, "generate"]), 2);

    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{"familly": {"n": 4}}"#).unwrap();
    assert_eq!(run(&["--config", &typo.display().to_string(), "--out-dir", &out_s, "generate"]), 2);

    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"family": {"n": 4, "n_eq": 4}}"#).unwrap();
    assert_eq!(
        run(&["--config", &invalid.display().to_string(), "--out-dir", &out_s, "generate"]),
        2
    );
}

#[test]
fn sweep_k_rejects_tracked_counts_beyond_budget() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(
        &path,
        r#"{
            "family": {"n": 4, "n_eq": 2, "n_ineq": 1},
            "dataset": {"train": 6, "val": 2, "test": 2},
            "fs": {"max_iters": 20},
            "train": {"epochs": 1, "batch_size": 6},
            "eval": {"k_list": [500]}
        }"#,
    )
    .unwrap();
    let cfg = path.display().to_string();
    let out_s = dir.path().join("run").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "generate"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "oracle"]), 0);
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "sweep-k"]), 2);
}

#[test]
fn dataset_shape_mismatch_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_s = dir.path().join("run").display().to_string();
    assert_eq!(run(&["--config", &cfg, "--out-dir", &out_s, "generate"]), 0);

    // same artifacts, bigger dataset request: stale data must be refused
    let bigger = dir.path().join("bigger.json");
    std::fs::write(
        &bigger,
        r#"{
            "family": {"kind": "qp", "variant": "convex", "n": 4, "n_eq": 2, "n_ineq": 1, "seed": 5},
            "dataset": {"train": 40, "val": 4, "test": 6, "seed": 6},
            "train": {"epochs": 1, "batch_size": 6}
        }"#,
    )
    .unwrap();
    assert_eq!(
        run(&["--config", &bigger.display().to_string(), "--out-dir", &out_s, "train"]),
        2
    );
}

#[test]
fn check_subcommand_passes_cleanly() {
    assert_eq!(run(&["check"]), 0);
    assert_eq!(run(&["--seed", "3", "check"]), 0);
}
