use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn netgrow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netgrow")).args(args).output().expect("binary runs")
}

fn iris() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/iris.csv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn train_writes_metrics_model_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = netgrow(&["train", "--data", s(&iris()), "--hidden", "6", "--tol", "1e-6", "--maxit", "40", "--seed", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "metrics.jsonl", "model.bin", "model.txt", "summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let events = jsonl(&out.join("metrics.jsonl"));
    assert!(events.len() >= 2);
    assert!(events.iter().all(|e| e["event"] == "epoch"));
    let model = netgrow::model_io::load(&out.join("model.bin")).unwrap();
    assert_eq!(model.topology().sizes(), &[4, 6, 3]);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[data]\nsynthetic = \"polynomial\"\nsamples = 30\n[train]\nhidden = 3\nmaxit = 5\n").unwrap();
    let out = dir.path().join("o");
    let o = netgrow(&["train", "--config", s(&cfg), "--hidden", "4", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed: toml::Value = toml::from_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["hidden"].as_integer(), Some(4));
    assert_eq!(echoed["train"]["maxit"].as_integer(), Some(5));
    assert_eq!(echoed["data"]["samples"].as_integer(), Some(30));
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = netgrow(&["train", "--data", "/nonexistent/d.csv", "--out", s(&dir.path().join("a"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/d.csv"));
    let widths = netgrow(&["ita", "--synthetic", "teacher", "--h0", "200", "--hmax", "100", "--out", s(&dir.path().join("b"))]);
    assert_eq!(widths.status.code(), Some(2));
    assert!(!dir.path().join("b").exists());
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nhiden = 3\n").unwrap();
    assert_eq!(netgrow(&["train", "--config", s(&bad_cfg)]).status.code(), Some(2));
    assert_eq!(netgrow(&["ita", "--growth", "triple"]).status.code(), Some(2));
    assert_eq!(netgrow(&["--help"]).status.code(), Some(0));
}

#[test]
fn ita_trace_shows_doubling_widths_and_continuous_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("i");
    let o = netgrow(&[
        "ita", "--data", s(&iris()), "--h0", "10", "--hmax", "100", "--seed", "1", "--epoch-budget", "150", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let events = jsonl(&out.join("metrics.jsonl"));
    let mut widths = vec![events[0]["width"].as_u64().unwrap()];
    for e in events.iter().filter(|e| e["event"] == "growth") {
        widths.push(e["to_width"].as_u64().unwrap());
        let before = e["risk_before"].as_f64().unwrap();
        let after = e["risk_after"].as_f64().unwrap();
        assert!((after - before).abs() <= 1e-12 * (1.0 + before.abs()));
    }
    assert!(widths.len() >= 2);
    assert_eq!(widths[..], [10, 20, 40, 80, 100][..widths.len()]);
}

#[test]
fn embed_grows_a_saved_model_without_changing_the_risk() {
    let dir = tempfile::tempdir().unwrap();
    let trained = dir.path().join("t");
    let data = ["--synthetic", "sinusoid", "--samples", "40"];
    let mut args = vec!["train", "--hidden", "3", "--maxit", "20", "--out", s(&trained)];
    args.extend(data);
    assert_eq!(netgrow(&args).status.code(), Some(0));
    let model = trained.join("model.bin");
    let grown = dir.path().join("e");
    let mut args = vec!["embed", "--model", s(&model), "--map", "beta", "--layer", "1", "--count", "2", "--out", s(&grown)];
    args.extend(data);
    let o = netgrow(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = &jsonl(&grown.join("report.jsonl"))[0];
    assert_eq!(report["verdict"], "Pass");
    let m = netgrow::model_io::load(&grown.join("model.bin")).unwrap();
    assert_eq!(m.topology().sizes(), &[2, 5, 1]);

    let again = dir.path().join("e2");
    let o = netgrow(&["embed", "--model", s(&model), "--spec", s(&grown.join("applied.json")), "--out", s(&again)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(again.join("model.bin")).unwrap(), std::fs::read(grown.join("model.bin")).unwrap());
}

#[test]
fn verify_reports_pass_lines_and_failing_controls() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = netgrow(&["verify", "--topology", "2,3,1", "--seeds", "2", "--negative-controls", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = jsonl(&out.join("verify.jsonl"));
    assert_eq!(lines.len(), 2 * 4);
    for l in &lines {
        let expected = if l["expected"] == "pass" { "Pass" } else { "Fail" };
        assert_eq!(l["verdict"], expected);
    }
    assert_eq!(lines.iter().filter(|l| l["expected"] == "fail").count(), 2);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), lines.len());
}

#[test]
fn verify_escape_check_runs_for_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = netgrow(&["verify", "--topology", "2,2,1", "--map", "alpha", "--seeds", "1", "--expect-escape", "--out", s(&out)]);
    let lines = jsonl(&out.join("verify.jsonl"));
    let escape = lines.iter().find(|l| l["check"] == "alpha_escape").expect("escape line");
    assert_eq!(escape["draws"], 50);
    let passed = escape["verdict"] == "Pass";
    assert_eq!(o.status.code(), Some(if passed { 0 } else { 1 }));
}

#[test]
fn bench_and_profile_produce_tables_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = netgrow(&[
        "bench", "--samples", "40", "--replicas", "2", "--budgets", "10,25", "--hidden", "6", "--h0", "2", "--jobs", "2",
        "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["table_10.csv", "table_25.csv", "summary_10.csv", "cells.jsonl", "traces.jsonl", "timings.csv", "config.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let table = netgrow::bench::ResultsTable::read_csv(&out.join("table_25.csv")).unwrap();
    assert_eq!(table.rows.len(), 4 * 2);
    let prof = dir.path().join("p");
    let o = netgrow(&["profile", "--table", s(&out.join("table_25.csv")), "--out", s(&prof)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(prof.join("profile_table_25.csv").is_file());
}

#[test]
fn profile_of_the_hand_example() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("hand.csv");
    std::fs::write(
        &table,
        "problem,solver,replica,budget,final_risk\np1,s1,0,1,2\np1,s2,0,1,4\np2,s1,0,1,3\np2,s2,0,1,3\n",
    )
    .unwrap();
    let out = dir.path().join("p");
    let o = netgrow(&["profile", "--table", s(&table), "--alphas", "1,2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("profile_hand.csv")).unwrap(), "alpha,rho_s1,rho_s2\n1,1,0.5\n2,1,1\n");

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "problem,solver,replica,budget,final_risk\n").unwrap();
    assert_eq!(netgrow(&["profile", "--table", s(&empty), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn commands_do_not_modify_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("iris.csv");
    std::fs::copy(iris(), &data).unwrap();
    let before = std::fs::read(&data).unwrap();
    let out = dir.path().join("t");
    assert_eq!(netgrow(&["train", "--data", s(&data), "--hidden", "2", "--maxit", "3", "--out", s(&out)]).status.code(), Some(0));
    assert_eq!(std::fs::read(&data).unwrap(), before);
}
