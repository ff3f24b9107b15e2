use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use diffnet::analysis;
use diffnet::cli::ExperimentConfig;
use diffnet::combiners::{self, Rule};
use diffnet::diffusion::DiffusionConfig;
use diffnet::graph::Topology;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffnet"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("diffnet-it-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str], dir: &Path, threads: &str) -> (i32, Value) {
    let out = bin().args(args).env("RAYON_NUM_THREADS", threads).output().unwrap();
    let summary = fs::read_to_string(dir.join("summary.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(Value::Null);
    (out.status.code().unwrap(), summary)
}

fn small_config(out: &Path) -> Value {
    json!({
        "seed": 4,
        "trials": 6,
        "iterations": 300,
        "model": { "seed": 2, "N": 5, "M": 2 },
        "topology": { "random": { "n": 5, "radius": 0.6 } },
        "strategy": { "variant": "cta", "a": { "rule": "metropolis" }, "c": { "rule": "relative_degree" }, "mu": 0.05 },
        "outputs": out,
    })
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["simulate", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().output().unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn invalid_configs_exit_with_status_two() {
    let dir = scratch("invalid");
    let p = dir.join("broken.json");
    fs::write(&p, "{ not json").unwrap();
    let s = p.to_str().unwrap();
    assert_eq!(bin().args(["simulate", "--config", s]).output().unwrap().status.code(), Some(2));

    let mut cfg = small_config(&dir);
    cfg["trials"] = json!(0);
    let p = write_config(&dir, &cfg);
    assert_eq!(bin().args(["simulate", "--config", p.to_str().unwrap()]).output().unwrap().status.code(), Some(2));

    let mut cfg = small_config(&dir);
    cfg["topology"] = json!({ "n": 3, "edges": [[1, 2], [2, 3]] });
    cfg["model"] = json!({ "seed": 1, "N": 3, "M": 1 });
    cfg["strategy"]["a"] = json!({ "matrix": [[0.5, 0.5, 0.5], [0.5, 0.0, 0.0], [0.0, 0.5, 0.5]] });
    let p = write_config(&dir, &cfg);
    assert_eq!(bin().args(["simulate", "--config", p.to_str().unwrap()]).output().unwrap().status.code(), Some(2));
}

#[test]
fn output_is_independent_of_thread_count() {
    let dir = scratch("det");
    let p = write_config(&dir, &small_config(&dir));
    let args = ["simulate", "--config", p.to_str().unwrap()];
    let read = || {
        ["learning_curve.csv", "steady_state.csv", "summary.json"].map(|f| fs::read(dir.join(f)).unwrap())
    };
    assert_eq!(run(&args, &dir, "1").0, 0);
    let first = read();
    assert_eq!(run(&args, &dir, "3").0, 0);
    assert_eq!(first, read());
}

#[test]
fn flags_override_the_config() {
    let dir = scratch("flags");
    let other = scratch("flags-out");
    let p = write_config(&dir, &small_config(&dir));
    let (code, _) = run(
        &["analyze", "--config", p.to_str().unwrap(), "--seed", "99", "--trials", "2", "--out", other.to_str().unwrap(), "--emit", "theory"],
        &dir,
        "1",
    );
    assert_eq!(code, 0);
    let s: Value = serde_json::from_str(&fs::read_to_string(other.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 99);
    assert_eq!(s["trials"], 2);
    assert!(!other.join("learning_curve.csv").exists());
}

#[test]
fn analyze_reports_theory_without_simulating() {
    let dir = scratch("analyze");
    let p = write_config(&dir, &small_config(&dir));
    let (code, s) = run(&["analyze", "--config", p.to_str().unwrap()], &dir, "1");
    assert_eq!(code, 0);
    assert!(s.get("simulation").is_none());
    let csv = fs::read_to_string(dir.join("learning_curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("i,emse_sim_db,emse_theory_db,msd_sim_db,msd_theory_db"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(row[1].is_empty() && row[3].is_empty());
    assert!(row[2].parse::<f64>().is_ok() && row[4].parse::<f64>().is_ok());
}

#[test]
fn theory_numbers_are_reproducible_from_the_library() {
    let dir = scratch("repro");
    let p = write_config(&dir, &small_config(&dir));
    let (code, s) = run(&["analyze", "--config", p.to_str().unwrap()], &dir, "1");
    assert_eq!(code, 0);

    let cfg: ExperimentConfig = serde_json::from_value(small_config(&dir)).unwrap();
    let model = cfg.model.unwrap().build().unwrap();
    let mut r = {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(u64::MAX);
        r
    };
    let t = diffnet::graph::random_geometric(5, 0.6, &mut r).unwrap();
    let a = combiners::build_combination(&t, &Rule::Metropolis).unwrap().into_entries();
    let c = combiners::build_combination(&t, &Rule::RelativeDegree).unwrap().into_entries().transpose();
    let dc = DiffusionConfig::cta(a, c, vec![0.05; 5]).unwrap();
    let (_, _, rep) = analysis::analyse(&model, &dc).unwrap();
    assert_eq!(s["theory"]["msd_network"].as_f64().unwrap(), rep.msd_network);
    assert_eq!(s["theory"]["emse_network"].as_f64().unwrap(), rep.emse_network);
    assert_eq!(s["theory"]["rho_b"].as_f64().unwrap(), rep.rho_b);
}

#[test]
fn reference_scenario_records_a_small_gap() {
    let dir = scratch("reference");
    let cfg = configs().join("reference.json");
    let (code, s) = run(
        &["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()],
        &dir,
        "1",
    );
    assert_eq!(code, 0);
    let gap = s["simulation"]["msd_gap_db"].as_f64().unwrap();
    assert!(gap < 1.5, "gap {gap} dB");
    let lc = fs::read_to_string(dir.join("learning_curve.csv")).unwrap();
    assert_eq!(lc.lines().count(), 3001);
}

#[test]
fn compare_checks_the_orderings() {
    let dir = scratch("compare");
    let cfg = configs().join("compare.json");
    let (code, s) = run(
        &["compare", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--trials", "10"],
        &dir,
        "1",
    );
    assert_eq!(code, 0);
    let rows = s["comparison"]["rows"].as_array().unwrap();
    let status = |rel: &str| rows.iter().find(|r| r["relation"] == rel).unwrap()["status"].clone();
    assert_eq!(status("atc <= cta <= lms"), "holds");
    assert_eq!(status("atc <= cta"), "holds");
    assert!(rows.iter().all(|r| r["status"] != "violated"));
}

#[test]
fn consensus_reports_the_decay_rate() {
    let dir = scratch("consensus");
    let cfg = configs().join("consensus.json");
    let (code, s) = run(
        &["consensus", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()],
        &dir,
        "1",
    );
    assert_eq!(code, 0);
    assert_eq!(s["converges"], true);
    assert!(s["relative_rate_gap"].as_f64().unwrap() < 0.02);

    let t = Topology::ring(12);
    let a = combiners::build_combination(&t, &Rule::Metropolis).unwrap().into_entries();
    let l2 = diffnet::stochmat::second_eigenvalue_magnitude(&a, 1e-9).unwrap();
    assert!((s["lambda2"].as_f64().unwrap() - l2).abs() < 1e-12);
}

#[test]
fn permutation_consensus_is_flagged_not_an_error() {
    let dir = scratch("perm");
    let cfg = json!({
        "seed": 1,
        "iterations": 50,
        "topology": { "n": 2, "edges": [[1, 2]] },
        "consensus": { "a": { "matrix": [[0.0, 1.0], [1.0, 0.0]] }, "z0": [[1.0], [-1.0]] },
        "outputs": dir,
    });
    let p = write_config(&dir, &cfg);
    let (code, s) = run(&["consensus", "--config", p.to_str().unwrap()], &dir, "1");
    assert_eq!(code, 0);
    assert_eq!(s["converges"], false);
}

#[test]
fn rls_and_kalman_commands_run() {
    let dir = scratch("rls");
    let cfg = configs().join("rls.json");
    let (code, s) = run(
        &["rls", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--trials", "5"],
        &dir,
        "1",
    );
    assert_eq!(code, 0);
    assert!(s["max_form_gap"].as_f64().unwrap() < 1e-8);
    assert!(dir.join("rls_curve.csv").exists());

    let dir = scratch("kalman");
    let cfg = configs().join("kalman.json");
    let (code, s) = run(
        &["kalman", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--trials", "5"],
        &dir,
        "1",
    );
    assert_eq!(code, 0);
    assert!(s["tracking_msd_steady_db"]["centralized"].is_number());
}
