use std::fs;
use std::path::Path;

use gatevio_cli::{cli_main, EXIT_OK, EXIT_VALIDATION};

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("gatevio").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(run(&["simulate", "--scenario", "ellipse", "--seed", "11", "--output-dir", s(out)]), EXIT_OK);
    }
    for name in ["imu.jsonl", "detections.jsonl", "gate_map.json", "ground_truth.csv", "config.json", "scenario.json"] {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert!(!x.is_empty(), "{name} empty");
        assert_eq!(x, y, "{name} differs between runs");
    }
}

#[test]
fn different_seeds_give_different_logs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["simulate", "--seed", "1", "--output-dir", s(&a)]), EXIT_OK);
    assert_eq!(run(&["simulate", "--seed", "2", "--output-dir", s(&b)]), EXIT_OK);
    assert_ne!(fs::read(a.join("imu.jsonl")).unwrap(), fs::read(b.join("imu.jsonl")).unwrap());
}

#[test]
fn full_pipeline_on_lemniscate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("config.json");
    assert_eq!(run(&["simulate", "--scenario", "lemniscate", "--seed", "2", "--output-dir", s(out)]), EXIT_OK);
    assert_eq!(run(&["run-vins", "--config", s(&cfg)]), EXIT_OK);
    assert_eq!(run(&["run-fgo", "--config", s(&cfg)]), EXIT_OK);
    let vins = format!("vins={}", s(&out.join("vins_trajectory.csv")));
    let fgo = format!("fgo={}", s(&out.join("fgo_trajectory.csv")));
    let reference = out.join("ground_truth.csv");
    assert_eq!(
        run(&["evaluate", "--reference", s(&reference), "--estimate", &vins, "--estimate", &fgo, "--output-dir", s(out)]),
        EXIT_OK
    );
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let vins_et = metrics["vins"]["e_t"].as_f64().unwrap();
    let fgo_et = metrics["fgo"]["e_t"].as_f64().unwrap();
    assert!(vins_et.is_finite() && vins_et < 0.1, "vins e_t {vins_et}");
    assert!(fgo_et.is_finite() && fgo_et < 0.1, "fgo e_t {fgo_et}");
    for name in ["update_reports.jsonl", "fgo_iterations.jsonl", "extrinsics.json", "errors_vins.csv", "errors_fgo.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn missing_map_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run(&["simulate", "--output-dir", s(out)]), EXIT_OK);
    let cfg = out.join("config.json");
    let missing = out.join("no_such_map.json");
    assert_eq!(run(&["run-vins", "--config", s(&cfg), "--map", s(&missing)]), EXIT_VALIDATION);
    assert!(!out.join("vins_trajectory.csv").exists());
}

#[test]
fn malformed_map_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run(&["simulate", "--output-dir", s(out)]), EXIT_OK);
    let bad = out.join("bad_map.json");
    fs::write(&bad, r#"{"gates":[{"id":0,"corners":[[0,0,1],[1,0,1],[1,0,0]]}]}"#).unwrap();
    let cfg = out.join("config.json");
    assert_eq!(run(&["run-vins", "--config", s(&cfg), "--map", s(&bad)]), EXIT_VALIDATION);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["bogus"]), EXIT_VALIDATION);
    assert_eq!(run(&["simulate", "--scenario", "nowhere"]), EXIT_VALIDATION);
    assert_eq!(run(&["evaluate", "--reference", "x.csv"]), EXIT_VALIDATION);
}

#[test]
fn bundled_scenarios_simulate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let dir = tempfile::tempdir().unwrap();
    for name in ["ellipse", "lemniscate", "racetrack3d"] {
        let spec = root.join(format!("{name}.json"));
        let out = dir.path().join(name);
        assert_eq!(run(&["simulate", "--spec", s(&spec), "--output-dir", s(&out)]), EXIT_OK, "{name}");
    }
}
