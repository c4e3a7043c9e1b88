use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_standby-sms"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn scenario_one_confirms_failover_txn() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("s1.jsonl");
    let out = run(&["scenario", "1", "--log", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    let confirmed = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["event"] == "SMS_LISTENER_LOG.status" && v["details"]["status"] == "CONFIRMED")
        .count();
    // one per run
    assert_eq!(confirmed, 2);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 4);
        for k in ["tick", "component", "event", "details"] {
            assert!(keys.contains(&k));
        }
        assert!(v["details"].as_object().unwrap().values().all(|d| !d.is_object() && !d.is_array()));
    }
}

#[test]
fn log_defaults_to_stdout() {
    let out = run(&["scenario", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().count() > 10);
    assert!(stdout.contains("OZEKIMESSAGEOUT.insert"));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("scenario 3: PASS"));
}

#[test]
fn out_of_range_scenario_is_usage_error() {
    assert_eq!(run(&["scenario", "5"]).status.code(), Some(2));
    assert_eq!(run(&["scenario", "0"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["fuzz", "--iterations", "0"]).status.code(), Some(2));
    assert_eq!(run(&["fuzz"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.conf", "loss_prob = 1.5\n");
    let out = run(&["all", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss_prob"));
    let cfg = write(dir.path(), "unknown.conf", "bogus = 1\n");
    assert_eq!(run(&["all", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(run(&["all", "--config", "/nonexistent/x.conf"]).status.code(), Some(2));
}

#[test]
fn failing_scenario_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t.conf", "query_timeout = 0\n");
    let out = run(&["scenario", "4", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TIMED_OUT"));
}

#[test]
fn fuzz_fifty_iterations_passes() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("fuzz.jsonl");
    let out = run(&["fuzz", "--iterations", "50", "--log", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 50);
}

#[test]
fn same_invocation_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "faulty.conf",
        "seed = 11\nloss_prob = 0.3\ndup_prob = 0.2\ndelay_max = 5\n",
    );
    let mut logs = Vec::new();
    for i in 0..2 {
        let log = dir.path().join(format!("{i}.jsonl"));
        let out = run(&["all", "--config", &cfg, "--log", log.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        logs.push(std::fs::read(&log).unwrap());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);

    let log = dir.path().join("seeded.jsonl");
    run(&["all", "--config", &cfg, "--seed", "12", "--log", log.to_str().unwrap()]);
    assert_ne!(std::fs::read(&log).unwrap(), logs[0]);
}
