use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_macrohydro"));
    cmd.env_remove("MACROHYDRO_THREADS");
    cmd
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL: &str = r#"{"format_version": 1, "model": {"name": "sep"}, "mesh": {"n": 8},
    "bc": {"kind": "q", "left": [0.3], "right": [0.7]}}"#;

#[test]
fn sep_example_is_long_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sep");
    let o = run(&["run", "--config", path_str(&example("sep.json")), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["profile.csv", "profile.json", "L.csv", "spectrum.json", "C.csv", "B.csv", "phi.csv", "report.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = json(&out.join("report.json"));
    assert_eq!(report["long_range"], Value::Bool(true));
    assert!((report["max_phi"].as_f64().unwrap() - 0.32).abs() < 1e-6);
    let spectrum = json(&out.join("spectrum.json"));
    assert!(spectrum["spectral_abscissa"].as_f64().unwrap() < 0.0);
    let c = std::fs::read_to_string(out.join("C.csv")).unwrap();
    assert_eq!(c.lines().count(), 32);
    assert_eq!(c.lines().next().unwrap().split(',').count(), 32);
}

#[test]
fn equilibrium_example_is_local() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eq");
    let o = run(&["covariance", "--config", path_str(&example("equilibrium.json")), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let report = json(&out.join("report.json"));
    assert_eq!(report["long_range"], Value::Bool(false));
    assert!(report["b_max"].as_f64().unwrap() < 1e-8 * report["c_local_max"].as_f64().unwrap());
}

#[test]
fn twocomp_example_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tc");
    let o = run(&["run", "--config", path_str(&example("twocomp.json")), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let report = json(&out.join("report.json"));
    assert!(report["onsager_defect"].as_f64().unwrap() < 1e-12);
    let header = std::fs::read_to_string(out.join("profile.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "x,q_0,q_1,theta_0,theta_1,j_0,j_1");
}

#[test]
fn unknown_key_exits_64_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"mesh\"", "\"flavour\": 3, \"mesh\""));
    let o = run(&["steady", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flavour"));
}

#[test]
fn schema_violations_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    for text in [
        SMALL.replace("\"format_version\": 1", "\"format_version\": 7"),
        SMALL.replace("{\"name\": \"sep\"}", "{\"name\": \"sep\", \"params\": {\"hopping\": 2}}"),
        SMALL.replace("[0.3]", "[0.3, 0.1]"),
        "not json".to_string(),
    ] {
        let cfg = write_config(dir.path(), &text);
        let o = run(&["steady", "--config", path_str(&cfg), "--out", path_str(&out)]);
        assert_eq!(o.status.code(), Some(64), "{text}");
    }
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["simulate", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sim"));
    let o = run(&["steady", "--config", path_str(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(64));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn numeric_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("[0.7]", "[1.5]"));
    let o = run(&["steady", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("steady"));
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SMALL.replace("\"mesh\": {\"n\": 8}", "\"mesh\": {\"n\": 12}, \"sim\": {\"n_paths\": 24, \"seed\": 5}"),
    );
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = bin()
            .env("MACROHYDRO_THREADS", threads)
            .args(["simulate", "--config", path_str(&cfg), "--out", path_str(&out)])
            .output()
            .unwrap();
        assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
        runs.push(outputs(&out));
    }
    assert_eq!(runs[0].len(), 11);
    assert_eq!(runs[0], runs[1]);
    let manifest = json(&dir.path().join("t1").join("manifest.json"));
    assert_eq!(manifest["seeds"][0], 5);
    let listed = manifest["outputs"].as_array().unwrap();
    assert_eq!(listed.len(), 11);
}

#[test]
fn seed_override_changes_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SMALL.replace("\"mesh\": {\"n\": 8}", "\"mesh\": {\"n\": 8}, \"sim\": {\"n_paths\": 8, \"seed\": 5}"),
    );
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        run(&["simulate", "--config", path_str(&cfg), "--out", path_str(&out), "--seed", seed]);
        std::fs::read(out.join("ensemble_cov.csv")).unwrap()
    };
    assert_ne!(read("1"), read("2"));
}

#[test]
fn reduced_paths_widen_instead_of_failing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&["simulate", "--config", path_str(&example("sep.json")), "--out", path_str(&out), "--paths", "20"]);
    assert_eq!(o.status.code(), Some(0));
    let tests = json(&out.join("tests.json"));
    assert_eq!(tests["n_paths"], 20);
    assert_eq!(tests["nominal_paths"], 2000);
    let statuses: Vec<&str> = tests["checks"]["tests"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["status"].as_str().unwrap())
        .collect();
    assert!(statuses.contains(&"WIDENED"));
    assert!(!statuses.contains(&"FAIL"));
    let auto = std::fs::read_to_string(out.join("autocorr.csv")).unwrap();
    assert_eq!(auto.lines().next().unwrap(), "lag,estimate,se,predicted");
    assert_eq!(auto.lines().count(), 52);
}

#[test]
fn mutation_breaks_the_long_range_comparison() {
    let o = run(&["verify", "--criteria", "2", "--mutate", "gamma-sign"]);
    assert_eq!(o.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().next().unwrap().contains("FAIL"));
    let o = run(&["verify", "--criteria", "2,3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("PASS").count(), 4);
}

#[test]
fn mutated_covariance_is_flagged_in_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = run(&["covariance", "--config", path_str(&example("sep.json")), "--out", path_str(&out), "--mutate", "gamma-sign"]);
    assert_eq!(o.status.code(), Some(0));
    let report = json(&out.join("report.json"));
    assert_eq!(report["mutation"], "gamma-sign");
    let b = std::fs::read_to_string(out.join("B.csv")).unwrap();
    let first: f64 = b.lines().nth(10).unwrap().split(',').nth(20).unwrap().parse().unwrap();
    assert!(first > 0.0);
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let o = bin()
        .env("MACROHYDRO_THREADS", "many")
        .args(["verify", "--criteria", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(64));
}
