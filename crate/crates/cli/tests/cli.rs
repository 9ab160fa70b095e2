use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "\
[population]
households = 400

[estimation]
replicates = 10
bootstrap_draws = 0
beta_grid = [1.0, 2.5, 0.25, 0.05]
sigma_s_grid = [0, 30, 10, 5]

[econometrics]
placebo_draws = 12
";

fn oopsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oopsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = oopsim(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error(dir: &Path, args: &[&str]) -> Value {
    let out = oopsim(dir, args);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice::<Value>(&out.stderr).unwrap()["error"].clone()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = workspace();
    let out = oopsim(dir.path(), &["bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = oopsim(dir.path(), &["counterfactual", "--params", "p.json", "--mode", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_across_runs_and_threads() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "--out", "a", "--threads", "1", "simulate", "--seed", "7"]);
    ok(d, &["--config", "small.toml", "--out", "b", "--threads", "3", "simulate", "--seed", "7"]);
    ok(d, &["--config", "small.toml", "--out", "c", "simulate", "--seed", "8"]);
    for f in ["panel.csv", "claims.csv", "events.csv", "population.csv", "summary.json", "manifest_simulate.json"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    assert_ne!(read(d.join("a/panel.csv")), read(d.join("c/panel.csv")));

    let manifest: Value = serde_json::from_slice(&read(d.join("a/manifest_simulate.json"))).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config"]["path"], "small.toml");
    assert_eq!(manifest["outputs"]["panel.csv"]["sha256"].as_str().unwrap().len(), 64);

    let header = String::from_utf8(read(d.join("a/panel.csv"))).unwrap();
    assert!(header.starts_with(
        "household_id,year,week,spend_per_person,n_members,post_service,post_bill,shoppable_flag,true_oop_week,perceived_theta_mean\n"
    ));
}

#[test]
fn pipeline_recovers_beta_and_runs_every_command() {
    let dir = workspace();
    let d = dir.path();
    let sim = ok(d, &["--config", "small.toml", "--out", "sim", "simulate", "--seed", "11"]);
    assert_eq!(sim["result"]["records"], 400 * 52);

    let est = ok(d, &["--config", "small.toml", "--out", "est", "estimate", "--observed", "sim/panel.csv"]);
    let beta = est["result"]["best_params"]["beta"].as_f64().unwrap();
    assert!((beta - 1.73).abs() <= 0.1, "beta {beta}");
    let manifest: Value = serde_json::from_slice(&read(d.join("est/manifest_estimate.json"))).unwrap();
    for role in ["observed", "population", "claims", "delays"] {
        assert!(manifest["inputs"][role]["sha256"].is_string(), "{role}");
    }
    let profile = String::from_utf8(read(d.join("est/profile.csv"))).unwrap();
    assert!(profile.starts_with("beta,sigma_s,objective,median_rmse,sd_rmse\n"));

    let cf = ok(
        d,
        &[
            "--config", "small.toml", "--out", "cf", "counterfactual", "--params", "est/estimate.json", "--mode",
            "recenter", "--population", "sim/population.csv", "--replicates", "4",
        ],
    );
    assert!(cf["result"]["share_reduced"].as_f64().unwrap() > 0.5);
    assert!(d.join("cf/households.csv").exists() && d.join("cf/weekly.csv").exists());

    let td = ok(d, &["--out", "rf", "tripdiff", "--panel", "sim/panel.csv"]);
    assert!(td["result"]["beta_post_service"].as_f64().unwrap() > 0.0);
    let report: Value = serde_json::from_slice(&read(d.join("rf/tripdiff.json"))).unwrap();
    let post_bill = report["fit"]["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "post_bill")
        .unwrap()
        .clone();
    for field in ["estimate", "se", "z", "effect"] {
        assert!(post_bill[field].is_number(), "{field}");
    }

    let es = ok(d, &["--out", "rf", "eventstudy", "--panel", "sim/panel.csv", "--events", "sim/events.csv", "--window", "2"]);
    let ks: Vec<i64> = es["result"]["points"].as_array().unwrap().iter().map(|p| p["k"].as_i64().unwrap()).collect();
    assert_eq!(ks, [-2, 0, 1, 2]);

    let args = ["--config", "small.toml", "--out", "rf", "placebo", "--panel", "sim/panel.csv", "--delays", "sim/delays.csv"];
    let p1 = ok(d, &args);
    let p2 = ok(d, &args);
    assert_eq!(p1, p2);
    let placebo: Value = serde_json::from_slice(&read(d.join("rf/placebo.json"))).unwrap();
    assert_eq!(placebo["draws"].as_array().unwrap().len(), 12);
}

#[test]
fn runtime_errors_are_json() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[contract]\ncoinsurance = 1.3\n").unwrap();
    let e = error(d, &["--config", "bad.toml", "generate"]);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["location"], "bad.toml:2");

    fs::write(d.join("typo.toml"), "[signal]\nbeta = 1\nsigma = 3\n").unwrap();
    let e = error(d, &["--config", "typo.toml", "generate"]);
    assert!(e["message"].as_str().unwrap().contains("sigma_s"), "{e}");

    fs::write(d.join("cells.toml"), "[population]\ncell_table = \"cells/none.csv\"\n").unwrap();
    let e = error(d, &["--config", "cells.toml", "generate"]);
    assert_eq!(e["kind"], "file_not_found");
    assert_eq!(e["path"], "cells/none.csv");

    let e = error(d, &["tripdiff", "--panel", "missing.csv"]);
    assert_eq!(e["kind"], "file_not_found");

    let e = error(d, &["--config", "missing.toml", "generate"]);
    assert_eq!(e["path"], "missing.toml");
}

#[test]
fn generate_writes_population_and_delays() {
    let dir = workspace();
    let d = dir.path();
    let g = ok(d, &["--config", "small.toml", "--out", "g", "generate"]);
    assert_eq!(g["result"]["households"], 400);
    assert!(d.join("g/population.csv").exists());
    assert!(d.join("g/delays.csv").exists());
    let sim = ok(
        d,
        &["--config", "small.toml", "--out", "s", "simulate", "--population", "g/population.csv"],
    );
    let direct = ok(d, &["--config", "small.toml", "--out", "t", "simulate"]);
    assert_eq!(sim["result"]["draw_checksum"], direct["result"]["draw_checksum"]);
    assert_eq!(read(d.join("s/panel.csv")), read(d.join("t/panel.csv")));
}
