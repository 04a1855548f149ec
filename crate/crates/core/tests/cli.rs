mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use common::Demo;

fn tir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tir-sql"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn missing_db_root_is_a_config_error() {
    let demo = Demo::new();
    let data = demo.dataset_file();
    let out_dir = demo.root().join("out");
    let out = tir(&["filter-data", "--db-root", "/definitely/not/here", "--dataset", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let demo = Demo::new();
    let cfg = demo.root().join("cfg.toml");
    std::fs::write(&cfg, "row_limt = 5\n").unwrap();
    let out = tir(&["filter-data", "--config", s(&cfg), "--db-root", s(demo.root())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row_limt"));
}

#[test]
fn invalid_values_are_config_errors() {
    let demo = Demo::new();
    let data = demo.dataset_file();
    let out = tir(&[
        "rollout", "--db-root", s(demo.root()), "--dataset", s(&data), "--mock-policy", "oracle", "--group-size", "0",
    ]);
    assert_eq!(code(&out), 2);
    let out = tir(&["train-toy", "--noise", "1.5", "--out-dir", s(&demo.root().join("o"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unreachable_policy_exits_3() {
    let demo = Demo::new();
    let data = demo.dataset_file();
    let out_dir = demo.root().join("out");
    let start = Instant::now();
    let out = tir(&[
        "evaluate", "--db-root", s(demo.root()), "--dataset", s(&data), "--out-dir", s(&out_dir),
        "--policy-url", "http://127.0.0.1:9", "--model", "m",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn filter_data_writes_kept_and_dropped() {
    let demo = Demo::new();
    let data = demo.dataset_file();
    let out_dir = demo.root().join("out");
    let out = tir(&["filter-data", "--db-root", s(demo.root()), "--dataset", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let kept: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(out_dir.join("kept.json")).unwrap()).unwrap();
    let dropped: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(out_dir.join("dropped.json")).unwrap()).unwrap();
    assert_eq!(kept.len() + dropped.len(), 10);
    assert_eq!(dropped.len(), 3);
    assert!(kept.iter().all(|k| k.get("SQL").is_some() && k.get("db_id").is_some()));
    assert!(out_dir.join("effective_config.toml").exists());

    let again_dir = demo.root().join("again");
    let out = tir(&[
        "filter-data", "--db-root", s(demo.root()), "--dataset", s(&out_dir.join("kept.json")), "--out-dir", s(&again_dir),
    ]);
    assert_eq!(code(&out), 0);
    let kept_again: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(again_dir.join("kept.json")).unwrap()).unwrap();
    assert_eq!(kept_again, kept);
}

fn rollout(demo: &Demo, dir: &str, extra: &[&str]) -> (Vec<serde_json::Value>, Vec<serde_json::Value>) {
    let data = demo.dataset_file();
    let out_dir = demo.root().join(dir);
    let mut args = vec!["rollout", "--db-root", s(demo.root()), "--dataset", s(&data), "--out-dir", s(&out_dir)];
    args.extend_from_slice(extra);
    let out = tir(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (lines(&out_dir.join("trajectories.jsonl")), lines(&out_dir.join("groups.jsonl")))
}

#[test]
fn rollout_writes_one_line_per_rollout() {
    let demo = Demo::new();
    let (trajs, groups) = rollout(&demo, "a", &["--mock-policy", "oracle", "--group-size", "3"]);
    assert_eq!(trajs.len(), 30);
    assert_eq!(groups.len(), 10);
    for t in &trajs {
        assert_eq!(t["termination"], "Answered");
        // Sample 9 has a broken gold query.
        let expected = if t["prompt_id"] == "9" { 0.0 } else { 1.2 };
        assert!((t["reward"]["total"].as_f64().unwrap() - expected).abs() < 1e-9, "{t}");
    }
    let (again, _) = rollout(&demo, "b", &["--mock-policy", "oracle", "--group-size", "3"]);
    assert_eq!(again, trajs);
}

#[test]
fn group_size_one_and_single_turn() {
    let demo = Demo::new();
    let (trajs, groups) = rollout(&demo, "a", &["--mock-policy", "oracle", "--group-size", "1", "--max-turns", "1"]);
    assert_eq!(trajs.len(), 10);
    assert_eq!(groups.len(), 10);
    for g in &groups {
        assert_eq!(g["advantages"], serde_json::json!([0.0]));
    }
    for t in &trajs {
        assert_eq!(t["turns_used"], 1);
    }
}

#[test]
fn scripted_policy_from_file() {
    let demo = Demo::new();
    let script = demo.root().join("script.json");
    std::fs::write(&script, serde_json::json!(["no tags here", "still nothing"]).to_string()).unwrap();
    let arg = format!("script:{}", script.display());
    let (trajs, _) = rollout(&demo, "a", &["--mock-policy", &arg, "--group-size", "2", "--max-turns", "2"]);
    assert_eq!(trajs.len(), 20);
    for t in &trajs {
        assert_eq!(t["termination"], "BudgetExhausted");
        assert_eq!(t["void_turns"], serde_json::json!([0, 1]));
    }
}

#[test]
fn evaluate_with_oracle() {
    let demo = Demo::new();
    let data = demo.dataset_file();
    let out_dir = demo.root().join("out");
    let out = tir(&[
        "evaluate", "--db-root", s(demo.root()), "--dataset", s(&data), "--out-dir", s(&out_dir), "--mock-policy", "oracle",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 10);
    assert_eq!(report["n_correct"], 9);
    let wrong: Vec<_> = report["verdicts"].as_array().unwrap().iter().filter(|v| v["correct"] == false).collect();
    assert_eq!(wrong.len(), 1);
    assert_eq!(wrong[0]["sample_id"], "9");
    let md = std::fs::read_to_string(out_dir.join("report.md")).unwrap();
    assert!(md.contains("| Paradigm | Samples | Correct | EX (%) |"));
}

#[test]
fn train_toy_outputs() {
    let demo = Demo::new();
    let run = |dir: &str, extra: &[&str]| {
        let out_dir = demo.root().join(dir);
        let mut args = vec!["train-toy", "--out-dir", s(&out_dir)];
        args.extend_from_slice(extra);
        let out = tir(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_dir.join("toy_curve.csv")).unwrap()
    };
    let empty = run("zero", &["--steps", "0"]);
    assert_eq!(empty.trim_end(), "step,mean_reward,kept_fraction,loss");

    let a = run("a", &["--steps", "40", "--seed", "7", "--noise", "0.3"]);
    let b = run("b", &["--steps", "40", "--seed", "7", "--noise", "0.3"]);
    let c = run("c", &["--steps", "40", "--seed", "8", "--noise", "0.3"]);
    assert_eq!(a.lines().count(), 41);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let off = run("off", &["--steps", "40", "--seed", "7", "--filter", "off"]);
    assert!(off.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1")), "{off}");
    assert!(demo.root().join("a/toy_summary.json").exists());
}
