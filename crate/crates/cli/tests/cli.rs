use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn axonflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axonflow")).args(args).current_dir(dir).env("AXONFLOW_THREADS", "2").output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

const SMALL: &str = r#"{
  "name": "small",
  "feature_maps": [
    {"id": "in", "depth": 2, "width": 10, "height": 9, "role": "input"},
    {"id": "a", "depth": 4, "width": 5, "height": 5, "activation": "relu"},
    {"id": "out", "depth": 3, "width": 1, "height": 1, "role": "output"}
  ],
  "layers": [
    {"kind": "conv", "sources": ["in"], "destination": "a", "kernel": [3, 3], "padding": [1, 1, 1, 1], "stride": 2, "weight_seed": 5, "divisor": 16},
    {"kind": "flatten_dense", "sources": ["a"], "destination": "out", "weight_seed": 6, "divisor": 64}
  ]
}"#;

fn small(dir: &Path) -> String {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn validate_reports_sizes() {
    let d = tempfile::tempdir().unwrap();
    let g = small(d.path());
    let out = axonflow(&["validate", "--graph", &g, "--format", "json"], d.path());
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["status"], "valid");
    assert_eq!(v["neurons"], 180 + 100 + 3);
}

#[test]
fn compile_and_simulate_are_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let g = small(d.path());
    for run in ["a", "b"] {
        let out = axonflow(&["compile", "--graph", &g, "--out", &format!("prog_{run}"), "--format", "json"], d.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = axonflow(&["simulate", "--program", &format!("prog_{run}"), "--frames", "3", "--seed", "9", "--out", &format!("sim_{run}")], d.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for sub in ["prog", "sim"] {
        let a = d.path().join(format!("{sub}_a"));
        let b = d.path().join(format!("{sub}_b"));
        let mut files: Vec<_> = walk(&a);
        files.sort();
        assert!(!files.is_empty());
        for f in files {
            let rel = f.strip_prefix(&a).unwrap();
            assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{}", rel.display());
        }
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn zero_input_sends_no_events() {
    let d = tempfile::tempdir().unwrap();
    let g = small(d.path());
    let out = axonflow(&["simulate", "--graph", &g, "--zero", "--format", "json"], d.path());
    assert!(out.status.success());
    assert_eq!(json(&out)["stats"][0]["events_sent"], 0);
}

#[test]
fn verify_random_graphs_pass() {
    let d = tempfile::tempdir().unwrap();
    let out = axonflow(&["verify", "--random", "200", "--seed", "1", "--shuffle", "--format", "json"], d.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    assert_eq!(v["status"], "PASS");
    assert_eq!(v["graphs"], 200);
    let sd = axonflow(&["verify", "--random", "30", "--mode", "sigma-delta", "--frames", "3", "--format", "json"], d.path());
    assert_eq!(json(&sd)["status"], "PASS");
}

#[test]
fn analyze_pilotnet_matches_memory_targets() {
    let d = tempfile::tempdir().unwrap();
    let out = axonflow(&["analyze", "--zoo", "pilotnet", "--format", "json"], d.path());
    assert!(out.status.success());
    let v = json(&out);
    let reports = v["comparison"]["reports"].as_array().unwrap();
    let proposed = &reports.iter().find(|r| r[0] == "proposed").unwrap()[1];
    assert!(proposed["connectivity"].as_u64().unwrap() <= 5 * 1024);
    let csv = axonflow(&["analyze", "--zoo", "pilotnet", "--format", "csv"], d.path());
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("network,scheme,category,bytes\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 3);
}

#[test]
fn errors_are_json_envelopes() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), r#"{"feature_maps": [], "layers": [{"kind": "lstm", "sources": [], "destination": "x"}]}"#)
        .unwrap();
    let out = axonflow(&["validate", "--graph", "bad.json"], d.path());
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "InvalidGraph");

    let out = axonflow(&["zoo", "lenet"], d.path());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "UnknownNetwork");

    let g = small(d.path());
    let out = axonflow(&["compile", "--graph", &g, "--out", "p", "--budget", "512", "--mesh", "1x1"], d.path());
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "PlacementFailed");

    let out = axonflow(&["compile", "--graph", &g, "--out", "p", "--mesh", "12by12"], d.path());
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "Usage");
}

#[test]
fn zoo_output_round_trips_through_validate() {
    let d = tempfile::tempdir().unwrap();
    let out = axonflow(&["zoo", "mobilenet_v1", "--seed", "2", "--out", "m.json"], d.path());
    assert!(out.status.success());
    let again = axonflow(&["zoo", "mobilenet_v1", "--seed", "2"], d.path());
    assert_eq!(std::fs::read(d.path().join("m.json")).unwrap(), again.stdout);
    assert!(axonflow(&["validate", "--graph", "m.json"], d.path()).status.success());
}
