use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const SMALL: &[&str] = &[
    "geometry.rings=4",
    "time.steps=16",
    "bem.elements=16",
    "bem.steps=16",
    "sampling.linear_samples=400",
    "sampling.fem_samples=8",
];

fn run(dir: &Path, command: &str, sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_shapeuq"));
    cmd.arg(command).env("SHAPEUQ_OUTPUT_DIR", dir);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn file_hashes(dir: &Path) -> BTreeMap<String, String> {
    let manifest = json(&dir.join("manifest.json"));
    manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["path"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn kinematics_passes_and_manifest_hashes_match() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "verify-kinematics", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hashes = file_hashes(dir.path());
    assert!(hashes.contains_key("report.txt") && hashes.contains_key("rates.csv"));
    for (name, hash) in hashes {
        let bytes = std::fs::read(dir.path().join(&name)).unwrap();
        let actual: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(actual, hash, "{name}");
    }
    assert_eq!(json(&dir.path().join("manifest.json"))["status"], "pass");
    assert!(!dir.path().join("error.json").exists());
}

#[test]
fn zero_data_solves_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "solve", &["data.preset=\"zero\"", "geometry.rings=4", "time.steps=8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("u0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("time,node,value"));
    let mut rows = 0;
    for line in lines {
        let value: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(value, 0.0);
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn invalid_value_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "solve", &["time.steps=-4"]);
    assert_eq!(out.status.code(), Some(2));
    let err = json(&dir.path().join("error.json"));
    assert_eq!(err["kind"], "config");
    assert_eq!(err["path"], "time.steps");
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "solve", &["time.step=4"]);
    assert_eq!(out.status.code(), Some(2));
    let err = json(&dir.path().join("error.json"));
    assert_eq!(err["path"], "time.step");
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[geometry]\nrings = 4\n\n[time]\nsteps = 8\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_shapeuq"))
        .args(["solve", "-c"])
        .arg(&cfg)
        .args(["--set", "time.t_final=0.5"])
        .env("SHAPEUQ_OUTPUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["config"]["geometry"]["rings"], 4);
    assert_eq!(manifest["config"]["time"]["steps"], 8);
    assert_eq!(manifest["config"]["time"]["t_final"], 0.5);
}

#[test]
fn failed_check_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "verify-kinematics", &["tolerances.kinematics_band=[1.5, 2.0]"]);
    assert_eq!(out.status.code(), Some(1));
    let err = json(&dir.path().join("error.json"));
    assert_eq!(err["kind"], "check");
    assert!(!err["failed_checks"].as_array().unwrap().is_empty());
    assert_eq!(json(&dir.path().join("manifest.json"))["status"], "fail");
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("nested").join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_shapeuq"))
        .args(["solve", "--set", "geometry.rings=4", "--set", "time.steps=8"])
        .args(["--set", "run.output_dir=\"ignored\""])
        .env("SHAPEUQ_OUTPUT_DIR", &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("manifest.json").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn sampling_is_reproducible_across_runs_and_threads() {
    let one: Vec<&str> = SMALL.iter().copied().chain(["run.threads=1"]).collect();
    let four: Vec<&str> = SMALL.iter().copied().chain(["run.threads=4"]).collect();
    for command in ["moments-mc", "moments-bie"] {
        let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        for (dir, sets) in dirs.iter().zip([&one, &one, &four]) {
            let out = run(dir.path(), command, sets);
            assert!(matches!(out.status.code(), Some(0 | 1)), "{command}: {}", String::from_utf8_lossy(&out.stderr));
        }
        let first = file_hashes(dirs[0].path());
        assert!(first.len() >= 2, "{command}: {first:?}");
        assert_eq!(first, file_hashes(dirs[1].path()), "{command}");
        assert_eq!(first, file_hashes(dirs[2].path()), "{command}");
    }
}
