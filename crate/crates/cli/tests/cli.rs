//! Exit codes and outputs of the `semran` binary.

use std::path::Path;
use std::process::{Command, Output};

fn semran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semran")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&semran(&["--help"])), 0);
    assert_eq!(code(&semran(&["--version"])), 0);
}

#[test]
fn bad_arguments_are_validation_errors() {
    assert_eq!(code(&semran(&[])), 1);
    assert_eq!(code(&semran(&["run", "--scenario", "nope", "--out", "x"])), 1);
    assert_eq!(code(&semran(&["oracle", "--check", "nope"])), 1);
    assert_eq!(code(&semran(&["run", "--scenario", "drift", "--seeds", "0", "--out", "x"])), 1);
}

#[test]
fn validate_reports_each_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.cfg", "paradigm = TrRan\nsnr_db = 5\n");
    let o = semran(&["validate", "--config", &good]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok "));

    let bad = write(dir.path(), "bad.cfg", "snr_db = 5\nbogus = 1\n");
    let o = semran(&["validate", "--config", &bad]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&semran(&["validate", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn run_writes_csv_traces_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "short.cfg", "horizon_slots = 300\n");
    let out = dir.path().join("out");
    let o = semran(&["run", "--scenario", "bandwidth", "--seeds", "1", "--out", out.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("bandwidth.csv").is_file());
    assert!(out.join("manifest.json").is_file());
    let traces = std::fs::read_dir(out.join("bandwidth.traces")).unwrap().count();
    assert_eq!(traces, 16);
}

#[test]
fn reserved_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "seed.cfg", "seed = 4\n");
    let out = dir.path().join("out");
    let o = semran(&["run", "--scenario", "drift", "--seeds", "1", "--out", out.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(code(&o), 1);
}

#[test]
fn pareto_and_gradcheck_oracles_pass() {
    assert_eq!(code(&semran(&["oracle", "--check", "pareto"])), 0);
    assert_eq!(code(&semran(&["oracle", "--check", "gradcheck"])), 0);
}
