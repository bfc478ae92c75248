use std::path::Path;
use std::process::{Command, Output};

fn nvmux(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvmux")).args(args).output().unwrap()
}

fn run_into(cmd: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", "default", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    nvmux(&args)
}

#[test]
fn sweep_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into("sweep", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sweep.csv").is_file());
    let summary: String = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(summary.contains("separation_hz"));
    assert!(summary.contains("\"seed\""));
}

#[test]
fn missing_config_is_usage_error() {
    let out = nvmux(&["sweep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn unreadable_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvmux(&["sweep", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run_into("calibrate", d.path(), &["--seed", "7"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("calibrate.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn short_noise_run_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into("noise", dir.path(), &["--duration", "10"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dumped_config_round_trips() {
    let out = nvmux(&["dump-config"]);
    assert_eq!(out.status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let out = nvmux(&["crosstalk", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("crosstalk.csv").is_file());
}
