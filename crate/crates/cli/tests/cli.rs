use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const EPPO: &str = env!("CARGO_BIN_EXE_eppo");

fn eppo(dir: &Path, args: &[&str]) -> Output {
    Command::new(EPPO)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

const WORLD: &str = r#"{"seed": 3, "n_demos": 60, "n_train": 200, "n_test": 300}"#;

fn run_config(algorithm: &str, budget: u32) -> String {
    format!(
        r#"{{"seed": 1, "budget": {budget}, "algorithm": "{algorithm}", "shots": 8,
            "evaluator": {{"kind": "synthetic", "world": {WORLD}}}}}"#
    )
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn run_logs_every_step_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "run.json", &run_config("disc_1p1", 100));
    for out in ["a", "b"] {
        let o = eppo(d, &["run", "--config", "run.json", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read(&d.join("a"), "progress.jsonl").lines().count(), 100);
    assert_eq!(read(&d.join("a"), "curve.csv").lines().count(), 101);
    for f in ["archive.jsonl", "progress.jsonl", "result.json", "curve.csv", "recommendation.txt"] {
        assert_eq!(read(&d.join("a"), f), read(&d.join("b"), f), "{f}");
    }
    let result: serde_json::Value = serde_json::from_str(&read(&d.join("a"), "result.json")).unwrap();
    assert_eq!(result["schema"], "eppo.result/v1");
    assert_eq!(result["bits_used"], 100.0);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "run.json", &run_config("random_search", 20));
    assert!(eppo(d, &["run", "--config", "run.json", "--out", "a"]).status.success());
    assert!(eppo(d, &["--seed", "2", "run", "--config", "run.json", "--out", "b"]).status.success());
    assert_ne!(read(&d.join("a"), "archive.jsonl"), read(&d.join("b"), "archive.jsonl"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "bad.json", &run_config("simulated_annealing", 10));
    let o = eppo(d, &["run", "--config", "bad.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulated_annealing"));
    assert_eq!(eppo(d, &["run", "--out", "x"]).status.code(), Some(2));
    write(d, "suite.json", r#"{"seed": 1, "algorithms": [], "shots": [4], "budgets": [5], "replicates": 2}"#);
    assert_eq!(eppo(d, &["bench", "--config", "suite.json"]).status.code(), Some(2));
}

#[test]
fn evaluator_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(
        d,
        "run.json",
        r#"{"seed": 1, "budget": 5, "algorithm": "disc_1p1", "shots": 2,
            "evaluator": {"kind": "process", "command": ["true"], "n_demos": 10, "timeout_ms": 5000}}"#,
    );
    let o = eppo(d, &["run", "--config", "run.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn process_evaluator_matches_in_process_world() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "world.json", &format!(r#"{{"kind": "synthetic", "world": {WORLD}}}"#));
    write(d, "local.json", &run_config("lengler_1p1", 30));
    let remote = format!(
        r#"{{"seed": 1, "budget": 30, "algorithm": "lengler_1p1", "shots": 8,
            "evaluator": {{"kind": "process", "command": [{EPPO:?}, "serve", "--evaluator", "world.json"],
                          "n_demos": 60, "timeout_ms": 20000}}}}"#
    );
    write(d, "remote.json", &remote);
    let a = eppo(d, &["run", "--config", "local.json", "--out", "local"]);
    let b = eppo(d, &["run", "--config", "remote.json", "--out", "remote"]);
    assert!(a.status.success());
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(read(&d.join("local"), "archive.jsonl"), read(&d.join("remote"), "archive.jsonl"));
    // curve test column is on demand for external evaluators
    assert!(read(&d.join("remote"), "curve.csv").lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn bounds_report_composes_calculators() {
    let tmp = tempfile::tempdir().unwrap();
    let o = eppo(tmp.path(), &["bounds", "--kappa", "2", "--budget", "100", "--T", "500", "--eps", "0.05"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let raw = r["delta_eppo"]["raw"].as_f64().unwrap();
    let want = 2f64.powi(100) * 2.0 * (-2.5f64).exp();
    assert!((raw / want - 1.0).abs() < 1e-12);
    assert_eq!(r["delta_eppo"]["clamped"], 1.0);
    assert!((r["epsilon_bound"].as_f64().unwrap() - 0.27019).abs() < 1e-5);
    let t = eppo(tmp.path(), &["bounds", "--format", "table"]);
    assert!(String::from_utf8_lossy(&t.stdout).contains("vacuous"));
}

#[test]
fn bounds_monte_carlo_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(
        d,
        "mc.json",
        r#"{"seed": 2, "world": {"n_demos": 20, "n_train": 100, "n_test": 10},
            "subject": {"kind": "fixed"}, "shots": 4, "budget": 1, "epsilon": 0.1,
            "replicates": 300, "true_questions": 20000}"#,
    );
    let o = eppo(d, &["bounds", "--config", "mc.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["schema"], "eppo.mc/v1");
    assert_eq!(r["consistent"], true);
}

#[test]
fn analyze_fuse_and_permute() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "a.txt", "0 1 2 3\n");
    write(d, "b.txt", "[4, 5, 6, 7]\n");
    let o = eppo(d, &["analyze", "fuse", "--a", "a.txt", "--b", "b.txt", "--strategy", "alternate", "--out", "f.txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fused: Vec<u32> = read(d, "f.txt").split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(fused.len(), 8);
    let mut sorted = fused.clone();
    sorted.sort();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());

    let o = eppo(d, &["analyze", "permute", "--preprompt", "a.txt", "--out", "perm"]);
    assert!(o.status.success());
    let study: serde_json::Value = serde_json::from_str(&read(&d.join("perm"), "study.json")).unwrap();
    assert_eq!(study["variants"].as_array().unwrap().len(), 10);
    assert!(study["deltas"].as_array().unwrap().iter().all(|d| d["num"] == 0));
    assert_eq!(read(&d.join("perm"), "study.csv").lines().count(), 11);

    write(d, "one.txt", "5\n");
    assert_eq!(eppo(d, &["analyze", "permute", "--preprompt", "one.txt"]).status.code(), Some(2));
}

#[test]
fn analyze_remove_sc_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "p.txt", "3 9 27 81\n");
    let o = eppo(d, &["analyze", "remove", "--preprompt", "p.txt", "--k", "3", "--samples", "4"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["variants"].as_array().unwrap().iter().all(|v| v.as_array().unwrap().len() == 3));

    let o = eppo(d, &["analyze", "sc", "--preprompt", "p.txt", "--paths", "1", "--tau", "0"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["sc_em"], r["single_path_em"]);
    assert_eq!(eppo(d, &["analyze", "sc", "--preprompt", "p.txt", "--paths", "4"]).status.code(), Some(2));

    write(d, "small.json", r#"{"kind": "synthetic", "world": {"n_demos": 50}}"#);
    let o = eppo(d, &["analyze", "transfer", "--preprompt", "p.txt", "--evaluator", "small.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("81"));
}

#[test]
fn subsample_uncertainty_brackets() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut items = String::new();
    for b in 0..=10 {
        for i in 0..5 {
            items.push_str(&format!("{{\"id\": \"q{b}-{i}\", \"correct_count\": {b}, \"n\": 10}}\n"));
        }
    }
    write(d, "items.jsonl", &items);
    let o = eppo(d, &["subsample", "--items", "items.jsonl", "--mode", "uncertainty", "--k", "22"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ids: Vec<String> = String::from_utf8(o.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(ids.len(), 22);
    for b in 0..=10 {
        assert_eq!(ids.iter().filter(|id| id.starts_with(&format!("q{b}-"))).count(), 2);
    }
    let o = eppo(d, &["subsample", "--items", "items.jsonl", "--mode", "layered", "--k", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(
        d,
        "suite.json",
        r#"{"seed": 1, "algorithms": ["random_search", "disc_1p1"], "shots": [4], "budgets": [10, 20],
            "replicates": 4, "world": {"n_demos": 30, "n_train": 50, "n_test": 50}}"#,
    );
    let o = eppo(d, &["bench", "--config", "suite.json", "--out", "bench"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&d.join("bench"), "bench.csv").lines().count(), 5);
    let r: serde_json::Value = serde_json::from_str(&read(&d.join("bench"), "bench.json")).unwrap();
    assert_eq!(r["schema"], "eppo.bench/v1");
    assert_eq!(r["budget_flags"].as_array().unwrap().len(), 2);
}
