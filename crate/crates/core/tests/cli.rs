use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mela(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mela")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "seed": 5,
        "synthetic": {"classes": 10, "dim": 12, "noise_std": 0.2, "k": 5, "n": 3, "m": 10, "seed": 2},
        "tasks": 60,
        "test_tasks": 20,
        "p": 8,
        "meta_train": {"steps": 200},
        "inference": {"v_init": 30},
        "pretrain": {"steps": 100},
        "finetune": {"steps": 50},
        "eval": {"draws": 200},
        "rate_study": {"t_grid": [5, 10], "seeds": 2},
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn ok(output: &Output) {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn full_run_writes_every_stage_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    ok(&mela(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    for name in ["embedding_sim.csv", "clusters.csv", "assignment.csv", "classifier.csv", "embedding_final.csv", "report.json", "report.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let r = report(&out);
    assert_eq!(r["command"], "run");
    assert_eq!(r["seed"], 5);
    assert_eq!(r["config"]["tasks"], 60);
    assert!(r["result"]["evaluate"]["final"]["logistic"]["mean"].as_f64().unwrap() > 0.5);
}

#[test]
fn rerun_is_byte_identical_and_resume_skips_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    ok(&mela(&args));
    let first = std::fs::read(out.join("report.json")).unwrap();
    ok(&mela(&args));
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), first);

    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let output = mela(&resumed);
    ok(&output);
    assert!(String::from_utf8_lossy(&output.stderr).contains("0 sweeps executed"));
    assert_eq!(report(&out)["result"]["infer_labels"]["sweeps_executed"], 0);
}

#[test]
fn verify_theory_reports_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("vt");
    ok(&mela(&["verify-theory", "--config", cfg.to_str().unwrap(), "--draws", "10000", "--out", out.to_str().unwrap()]));
    let r = &report(&out)["result"];
    for key in ["gls", "pretrain", "holds", "pointwise_violations"] {
        assert!(!r[key].is_null(), "{key} missing");
    }
    assert_eq!(r["gls"]["num_draws"], 10000);
    assert_eq!(r["pointwise_violations"], 0);
    assert_eq!(r["holds"], true);
}

#[test]
fn separable_episodes_are_all_clustered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sim");
    let c = cfg.to_str().unwrap();
    ok(&mela(&["simulate", "--config", c, "--out", out.to_str().unwrap()]));
    let tasks = out.join("tasks.csv");
    let labels = dir.path().join("labels");
    ok(&mela(&["infer-labels", "--config", c, "--input", tasks.to_str().unwrap(), "--out", labels.to_str().unwrap()]));
    let assignment = std::fs::read_to_string(labels.join("assignment.csv")).unwrap();
    assert!(assignment.lines().count() > 1);
    assert!(!assignment.lines().any(|l| l.ends_with(",-1")));
    let r = report(&labels);
    assert_eq!(r["result"]["tasks_discarded"], 0);
    assert_eq!(r["result"]["clustering_accuracy"], 1.0);
}

#[test]
fn rate_study_csv_has_a_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("rate");
    ok(&mela(&["rate-study", "--config", cfg.to_str().unwrap(), "--t-grid", "10,40,160", "--draws", "50", "--out", out.to_str().unwrap()]));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("T,N,"));
    assert!(lines[3].starts_with("160,"));
}

#[test]
fn stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("chain");
    let o = out.to_str().unwrap();
    for cmd in ["infer-labels", "pretrain", "finetune", "evaluate", "domains"] {
        ok(&mela(&[cmd, "--config", c, "--out", o]));
        assert_eq!(report(&out)["command"], cmd);
    }
    assert!(out.join("embedding_final.csv").is_file());
    assert_eq!(report(&out)["result"]["domains"], 1);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mela(&["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(mela(&["no-such-command"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"inference": {"q": -1}}"#).unwrap();
    assert_eq!(mela(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(mela(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.csv");
    assert_eq!(mela(&["simulate", "--input", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn stage_failures_exit_with_one_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let output = mela(&["finetune", "--out", out.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("stage"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "task_id,sample_id,role,local_label,global_label,f0\n0,0,support,0,,zz\n").unwrap();
    let output = mela(&["infer-labels", "--input", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("line 2"));
}
