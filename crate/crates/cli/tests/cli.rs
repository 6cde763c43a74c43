use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn defmarl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defmarl")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path, algo: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"version = 1
task = "target"
n_agents = 2
horizon = 8
algorithm = "{algo}"
model = "compact"
seeds = [0]
out_dir = "{}"
updates = 5
checkpoint_every = 2

[train]
n_envs = 4
"#,
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_one_row_per_update_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = tiny_config(a.path(), "def-marl");
    let cb = tiny_config(b.path(), "def-marl");
    let oa = defmarl(&["train", "--config", ca.to_str().unwrap()]);
    let ob = defmarl(&["train", "--config", cb.to_str().unwrap()]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(ob.status.success(), "{}", stderr(&ob));

    let metrics = fs::read_to_string(a.path().join("out/seed0/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 5);
    assert!(a.path().join("out/config.toml").exists());

    let hash = |s: &str| s.split("sha256 ").nth(1).map(|h| h.trim().to_string());
    assert!(hash(&stdout(&oa)).is_some());
    assert_eq!(hash(&stdout(&oa)), hash(&stdout(&ob)));
}

#[test]
fn unknown_task_is_reported_with_its_location() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), "def-marl");
    let text = fs::read_to_string(&cfg).unwrap().replace("\"target\"", "\"maze\"");
    fs::write(&cfg, text).unwrap();
    let o = defmarl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("maze") && err.contains("line 2"), "{err}");
}

#[test]
fn eval_records_overridden_xi() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), "def-marl");
    assert!(defmarl(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let report = d.path().join("report.json");
    let o = defmarl(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        d.path().join("out/seed0/final.json").to_str().unwrap(),
        "--episodes",
        "3",
        "--xi",
        "0.2",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["xi"], 0.2);
    assert_eq!(v["n_episodes"], 3);
    assert_eq!(v["algorithm"], "def-marl");
    assert_eq!(v["episodes"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_rejects_mismatched_task() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), "penalty(0.5)");
    assert!(defmarl(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let o = defmarl(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--task",
        "spread",
        "--checkpoint",
        d.path().join("out/seed0/final.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_on_a_small_suite() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("verify.json");
    let o = defmarl(&["verify", "--instances", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["tabular"]["n_instances"], 5);
}

#[test]
fn export_merges_runs_with_algorithm_column() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), "lagr(0.78)");
    assert!(defmarl(&["train", "--config", cfg.to_str().unwrap(), "--updates", "3"]).status.success());
    let out = d.path().join("all.csv");
    let o = defmarl(&["export-metrics", "--out", out.to_str().unwrap(), d.path().join("out").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "algorithm,seed,step,policy_loss,vl_loss,vh_loss,entropy,mean_cost,safety_rate,lambda,wall_clock"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn export_without_runs_fails() {
    let d = tempfile::tempdir().unwrap();
    let o = defmarl(&["export-metrics", "--out", d.path().join("x.csv").to_str().unwrap(), d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
