//! End-to-end checks of the `simcert` binary: subcommands, artifacts on
//! disk, and the documented exit codes (0 pass, 2 certification failure,
//! 1 usage error).

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simcert"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("simcert-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_scenario(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

const PATH_SCENARIO: &str = r#"{
  "name": "non-equitable path",
  "coupling": {"kind": "path", "n": 4},
  "partition": [2, 2],
  "lambda": 2.0,
  "simulation": {"t_final": 1.0, "dt": 0.01}
}"#;

#[test]
fn casestudy_produces_artifacts_and_exit_zero() {
    let dir = temp_dir("casestudy");
    let status = bin()
        .args(["casestudy", "--n", "9", "--t", "2", "--dt", "0.001", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for file in ["error_trace.csv", "summary.json", "plot.html"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    assert!(dir.join("trajectories").join("concrete.csv").exists());
    assert!(dir.join("trajectories").join("abstract.csv").exists());

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["bound_violations"], 0);
    assert!(summary["small_gain"]["small_gain_value"].as_f64().unwrap() - 0.8 < 1e-12);

    let trace = std::fs::read_to_string(dir.join("error_trace.csv")).unwrap();
    assert!(trace.starts_with("t,err,bound"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn non_equitable_partition_exits_with_certification_code() {
    let dir = temp_dir("path");
    let scenario = write_scenario(&dir, "path.json", PATH_SCENARIO);
    let out = bin().arg("simulate").arg(&scenario).arg("--out").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("coupling match"));

    // per-subsystem certificates still verify on their own
    let status = bin().arg("certify").arg(&scenario).arg("--out").arg(&dir).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.join("certify.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compose_writes_composition_certificate() {
    let dir = temp_dir("compose");
    let scenario = write_scenario(
        &dir,
        "complete.json",
        r#"{
  "coupling": {"kind": "complete", "n": 6},
  "partition": [2, 2, 2],
  "lambda": 2.0,
  "simulation": {"t_final": 1.0, "dt": 0.01}
}"#,
    );
    let status = bin().arg("compose").arg(&scenario).arg("--out").arg(&dir).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let cert: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("composition.json")).unwrap()).unwrap();
    assert!(cert["coupling_match_residual"].as_f64().unwrap() <= 1e-12);
    assert_eq!(cert["mhat_coupling"].as_array().unwrap().len(), 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().args(["casestudy", "--n", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["simulate", "/definitely/not/a/file.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["smallgain", "--n", "1", "--lambda", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_scenario_keys_are_rejected() {
    let dir = temp_dir("unknown");
    let scenario = write_scenario(
        &dir,
        "bad.json",
        r#"{"coupling": {"kind": "complete", "n": 6}, "partition": [2,2,2], "lambda": 2.0,
            "simulation": {"t_final": 1.0, "dt": 0.01}, "no_such_key": true}"#,
    );
    let out = bin().arg("certify").arg(&scenario).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn smallgain_prints_record() {
    let out = bin().args(["smallgain", "--n", "9", "--lambda", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((record["small_gain_value"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!((record["spectral_radius"].as_f64().unwrap() - 9.0).abs() < 1e-6);
}

#[test]
fn synthesize_explicit_route() {
    let dir = temp_dir("synth");
    let scenario = write_scenario(
        &dir,
        "explicit.json",
        r#"{
  "coupling": {"kind": "explicit", "entries": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]},
  "systems": [
    {
      "name": "plant",
      "a": [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-0.5, -1.0, -2.0]],
      "b": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
      "c1": [[1.0, 0.0, 0.0]],
      "d": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
      "kappa_hat": 1.0
    }
  ],
  "abstractions": [
    {"system": "plant", "p": [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]}
  ],
  "simulation": {"t_final": 1.0, "dt": 0.01}
}"#,
    );
    let status = bin().arg("synthesize").arg(&scenario).arg("--out").arg(&dir).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("plant_abstraction.json")).unwrap()).unwrap();
    assert_eq!(json["abstract_system"]["a"].as_array().unwrap().len(), 2);
    assert!(json["construction_log"].as_array().unwrap().len() >= 8);
    std::fs::remove_dir_all(&dir).ok();
}
