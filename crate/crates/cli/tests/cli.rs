use std::process::Command;

fn gdkl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gdkl"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn verify_passes() {
    let out = gdkl().arg("verify").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn unknown_method_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "method = \"Nope\"\n").unwrap();
    let out = gdkl().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

#[test]
fn unknown_override_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ok.toml");
    std::fs::write(&path, "method = \"GP-RBF\"\n").unwrap();
    let out = gdkl().arg("run").arg(&path).args(["--no_such_field", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_applies_overrides_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.toml");
    let report = dir.path().join("report.json");
    std::fs::write(&path, "method = \"GP-RBF\"\ndataset = \"builtin:toy\"\n").unwrap();
    let out = gdkl()
        .arg("run")
        .arg(&path)
        .args(["--total_steps", "50", "--seeds", "[1]", "--output"])
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"total_steps\": 50"));
    assert!(json.contains("\"std_at_6\""));
}

#[test]
fn toy_writes_plot_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = gdkl()
        .args(["toy", "--steps", "50", "--grid", "20", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let fit = std::fs::read_to_string(dir.path().join("toy_fit.csv")).unwrap();
    assert_eq!(fit.lines().count(), 21);
    assert!(fit.starts_with("x,truth,mean,std,lower,upper"));
    let data = std::fs::read_to_string(dir.path().join("toy_data.csv")).unwrap();
    assert!(data.lines().any(|l| l.ends_with(",d2")));
}
