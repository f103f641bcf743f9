use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "mesh = 21\nwindows = 4\nwindow = 0.5\nspin_up = 1\narchive_horizon = 0.5\nn_p = 4\nn_a = 10\nreplicates = 2\nprior_modes = 60\n";

fn arbenkf(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arbenkf")).args(args).env("ARBENKF_CACHE_DIR", cache).output().expect("binary runs")
}

fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("not JSON: {text}"));
    v["error"].clone()
}

fn csv_without_wall_clock(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn run_writes_one_csv_per_replicate_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cache = dir.path().join("cache");
    let cfg_s = cfg.to_str().unwrap();

    let truth = arbenkf(&cache, &["truth", "--config", cfg_s]);
    assert!(truth.status.success(), "{}", String::from_utf8_lossy(&truth.stderr));
    let info: serde_json::Value = serde_json::from_slice(&truth.stdout).unwrap();
    let hash = info["truth_hash"].as_str().unwrap();
    assert!(cache.join(format!("truth-{hash}.f64")).is_file());
    assert!(cache.join(format!("archive-{hash}.json")).is_file());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = arbenkf(&cache, &["run", "--config", cfg_s, "--out", out.to_str().unwrap(), "--threads", "1"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        assert!(String::from_utf8_lossy(&r.stdout).contains("2 replicates"));
    }
    for name in ["replicate_000.csv", "replicate_001.csv"] {
        assert_eq!(csv_without_wall_clock(&a.join(name)), csv_without_wall_clock(&b.join(name)));
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["count"], 2);
    assert_eq!(summary["config"]["mesh"], "21");

    let report = arbenkf(&cache, &["report", "--out", a.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("median final-quarter error"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let r = arbenkf(&dir.path().join("cache"), &["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--replicates", "1", "--seed", "9"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["count"], 1);
    assert_eq!(summary["config"]["seed"], "9");
    assert!(!out.join("replicate_001.csv").exists());
}

#[test]
fn failures_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");

    let r = arbenkf(&cache, &["run", "--out", "x", "--frobnicate"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(stderr_error(&r)["kind"], "usage");

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "mesh = 21\nfilter = kalman\n").unwrap();
    let r = arbenkf(&cache, &["truth", "--config", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let e = stderr_error(&r);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("kalman"));

    let r = arbenkf(&cache, &["truth", "--mesh", "30"]);
    assert_eq!(stderr_error(&r)["kind"], "config");

    let r = arbenkf(&cache, &["report", "--out", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(stderr_error(&r)["kind"], "io");

    let r = arbenkf(&cache, &["truth", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(stderr_error(&r)["kind"], "io");
}

#[test]
fn selftest_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let r = arbenkf(dir.path(), &["selftest"]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("6 passed, 0 failed"));
}
