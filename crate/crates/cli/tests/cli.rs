use std::path::Path;
use std::process::Command;

fn stdr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stdr"))
}

fn quick_run(out: &Path, seed: u64) {
    let status = stdr()
        .args(["--quick", "--replications", "1", "--methods", "ipw_only,outcome_only,cbps_scad_static", "--seed"])
        .arg(seed.to_string())
        .arg("--output")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn quick_run_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    quick_run(dir.path(), 5);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(dir.path().join("replications.csv").is_file());
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    quick_run(a.path(), 9);
    quick_run(b.path(), 9);
    for f in ["replications.csv", "metrics.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn config_file_and_print_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "replications = 4\nseed = 3\n[dgp]\nn = 80\np = 10\nblock_size = 5\n").unwrap();
    let out = stdr().arg("--config").arg(&path).args(["--seed", "11", "--print-config"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("replications = 4"));
    assert!(text.contains("seed = 11"));
    assert!(text.contains("n = 80"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = stdr().args(["--methods", "tarnet", "--print-config"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "no_such_key = 1\n").unwrap();
    assert!(!stdr().arg("--config").arg(&path).status().unwrap().success());
}
