use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stacklq"))
}

fn config(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// The named config on a coarse grid with few paths.
fn small(name: &str, n_steps: usize, n_paths: usize) -> Value {
    let mut v = config(name);
    v["grid"]["n_steps"] = json!(n_steps);
    v["sim"]["n_paths"] = json!(n_paths);
    v
}

fn run(cfg: &Value, dir: &Path, extra: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    bin()
        .arg("run")
        .arg(&path)
        .arg("--output-dir")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_column(path: PathBuf, name: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect()
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn zero_leader_control_weight_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small("cid_generic.json", 20, 100);
    cfg["spec"]["N2"] = json!(0.0);
    let out = run(&cfg, tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("N2"), "{err}");
}

#[test]
fn malformed_configs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small("cid_generic.json", 20, 100);
    cfg["unknown"] = json!(1);
    assert_eq!(run(&cfg, tmp.path(), &[]).status.code(), Some(2));
    let missing = bin().arg("run").arg(tmp.path().join("nope.json")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn zero_state_weights_give_zero_controls() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small("cid_generic.json", 40, 500);
    for k in ["Q1", "G1", "Q2", "G2"] {
        cfg["spec"][k] = json!(0.0);
    }
    let out = run(&cfg, tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = tmp.path().join("out/summary.csv");
    for col in ["u1_mean", "u2_mean", "u1_se", "u2_se"] {
        assert!(csv_column(summary.clone(), col).iter().all(|v| *v == 0.0), "{col}");
    }
}

#[test]
fn generic_cid_run_verifies() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("cid_generic.json", 100, 10_000);
    let out = run(&cfg, tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");
    for f in ["riccati.csv", "paths.csv", "summary.csv", "verification.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let v = read_json(dir.join("verification.json"));
    assert_eq!(v["tower"]["pass"], json!(true));
    assert_eq!(v["stationarity"]["leader"]["pass"], json!(true));
    assert_eq!(v["stationarity"]["follower"]["pass"], json!(true));
    assert!(v["residuals"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["pass"] == json!(true)));
    assert!(v["adjoint"]["terminal_error"].as_f64().unwrap() <= 1e-8);
    // Every CSV declares its columns.
    let mut rdr = csv::Reader::from_path(dir.join("riccati.csv")).unwrap();
    assert_eq!(&rdr.headers().unwrap()[0], "node");
}

#[test]
fn reruns_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg = small("cid_generic.json", 30, 300);
    assert!(run(&cfg, a.path(), &[]).status.success());
    assert!(run(&cfg, b.path(), &["--threads", "2"]).status.success());
    let (oa, ob) = (outputs(&a.path().join("out")), outputs(&b.path().join("out")));
    assert_eq!(oa.len(), 4);
    assert_eq!(oa, ob);
}

#[test]
fn seed_override_changes_paths() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg = small("cid_generic.json", 20, 100);
    assert!(run(&cfg, a.path(), &[]).status.success());
    assert!(run(&cfg, b.path(), &["--seed-override", "9"]).status.success());
    let pa = fs::read(a.path().join("out/paths.csv")).unwrap();
    let pb = fs::read(b.path().join("out/paths.csv")).unwrap();
    assert_ne!(pa, pb);
    let ra = fs::read(a.path().join("out/riccati.csv")).unwrap();
    let rb = fs::read(b.path().join("out/riccati.csv")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn general_mode_writes_blocks_and_sigma() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("general_2d.json", 50, 100);
    let out = run(&cfg, tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");
    assert!(dir.join("blocks.json").exists());
    assert!(dir.join("sigma.csv").exists());
    assert!(dir.join("riccati.csv").exists() || dir.join("failure.json").exists());
    let blocks = read_json(dir.join("blocks.json"));
    assert!(blocks.get("T").is_some());
}

#[test]
fn principal_agent_mode_writes_contract() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("pa_generic.json", 50, 2_000);
    let out = run(&cfg, tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");
    for f in ["gains.csv", "paths.csv", "costs.json", "verification.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let costs = read_json(dir.join("costs.json"));
    assert!(costs.to_string().contains("std_error"));
}

#[test]
fn horizon_mismatch_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small("pa_generic.json", 20, 100);
    cfg["spec"]["T"] = json!(2.0);
    assert_eq!(run(&cfg, tmp.path(), &[]).status.code(), Some(2));
}
