use std::fs;
use std::path::Path;
use std::process::Command;

const SHORT: &str = "grid.n = 128\nflow.t_max = 2e-6\nflow.max_steps = 20\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_collarflow"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_only_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "a.cfg", SHORT);
    let out = tmp.path().join("out");
    let st = bin().args(["run", cfg.to_str().unwrap(), "--validate-only", "--out", out.to_str().unwrap()]).output().unwrap();
    assert!(st.status.success());
    assert!(!out.exists());
}

#[test]
fn bad_config_gives_error_json_and_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.cfg", "grid.n = 128\nflow.eta = -1\nflow.bogus = 3\n");
    let st = bin().args(["run", cfg.to_str().unwrap(), "--validate-only"]).output().unwrap();
    assert!(!st.status.success());
    let v: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    let issues = v["issues"].as_array().unwrap();
    assert_eq!(issues.len(), 2);
    assert_eq!(issues[0]["line"], 2);
    assert_eq!(issues[0]["kind"], "range");
    assert_eq!(issues[1]["kind"], "unknown_key");
}

#[test]
fn run_failure_writes_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.cfg", &format!("{SHORT}target.c_n = 2\n"));
    let out = tmp.path().join("out");
    let st = bin().args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("C_N"));
}

#[test]
fn two_runs_give_identical_series() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "d.cfg", SHORT);
    for name in ["x", "y"] {
        let out = tmp.path().join(name);
        let st = bin().args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).output().unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stdout));
    }
    let a = fs::read(tmp.path().join("x/series.csv")).unwrap();
    let b = fs::read(tmp.path().join("y/series.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_runs_each_block() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "e.cfg", SHORT);
    let sweep = write(tmp.path(), "s.txt", "target.delta = 0.25\n---\ntarget.delta = 0.75\n");
    let out = tmp.path().join("sw");
    let st = bin()
        .args(["run", cfg.to_str().unwrap(), "--sweep", sweep.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stdout));
    for d in ["run_000", "run_001"] {
        assert!(out.join(d).join("summary.json").exists());
    }
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_001/summary.json")).unwrap()).unwrap();
    assert_eq!(s["config"]["target"]["delta"], 0.75);
}
