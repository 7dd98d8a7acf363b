use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_effham-lab"))
}

fn env_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/env/constant_drift.toml")
}

fn write_config(dir: &Path, cap: f64) -> PathBuf {
    let text = format!(
        r#"
id = "hj1d-smoke"
environment = {env:?}

[tolerances]
hj_error_cap = {cap:e}

[hj1d]
eps = [0.1, 0.05]
mu = 0.0
left = 0.0
right = 0.0
cells_per_eps = 16
g = {{ knots = [0.0, 1.0], pieces = [[1.0, 1.0, -1.0]] }}
"#,
        env = env_config().display().to_string(),
    );
    let path = dir.join("hj1d.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn hj1d_run_writes_summary_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 0.05);
    let out = tmp.path().join("out");
    let status = bin().arg("hj1d").arg("--config").arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"][0]["id"], "hj1d-smoke");
    assert!(out.join("hj1d-smoke.csv").exists());

    // the report subcommand rebuilds the same index from the records
    let status = bin().arg("report").arg("--records").arg(&out).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn failing_verdict_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1e-9);
    let status = bin()
        .arg("hj1d")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_config_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .arg("eig")
        .arg("--config")
        .arg(tmp.path().join("absent.toml"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    let status = bin().arg("eig").status().unwrap();
    assert_eq!(status.code(), Some(3));
}
