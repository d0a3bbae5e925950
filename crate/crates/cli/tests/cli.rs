use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn dflshield(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dflshield"));
    c.args(args).env_remove("DFLSHIELD_OUT");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

/// A short copy of the 8-node baseline with edits applied line by line.
fn write_config(dir: &Path, name: &str, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = std::fs::read_to_string(scenarios().join("baseline-8.toml")).unwrap();
    text = text.replace("rounds = 20", "rounds = 3");
    for (from, to) in edits {
        text = text.replace(from, to);
    }
    let p = dir.join(format!("{name}.toml"));
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_shipped_scenarios() {
    for name in ["baseline-8", "encryption-mtd-50", "eclipse-mtd"] {
        let cfg = scenarios().join(format!("{name}.toml"));
        let out = run(&mut dflshield(&["validate", "--config", s(&cfg)]));
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn schema_and_validation_errors_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "[scenario]\nname = \"x\"\nbogus = 1\n").unwrap();
    let out = run(&mut dflshield(&["validate", "--config", s(&unknown)]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let bad = write_config(dir.path(), "bad", &[("nodes = 8", "nodes = 1")]);
    let out = run(&mut dflshield(&["run", "--config", s(&bad), "--out", s(&dir.path().join("o"))]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenario.nodes"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn run_writes_artifacts_and_env_overrides_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", &[]);
    let env_out = dir.path().join("from-env");
    let flag_out = dir.path().join("from-flag");
    let out = run(dflshield(&["run", "--config", s(&cfg), "--out", s(&flag_out)]).env("DFLSHIELD_OUT", &env_out));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!flag_out.exists());
    for f in ["report.csv", "links.csv", "summary.json", "scenario.toml", "frames.jsonl", "node-0.json"] {
        assert!(env_out.join(f).is_file(), "missing {f}");
    }
    assert!(!env_out.join("INCOMPLETE").exists());
    let report = std::fs::read_to_string(env_out.join("report.csv")).unwrap();
    assert!(report.starts_with(
        "config,node,round,f1,loss,cpu_pct,ram_pct,net_bytes,throughput_mbps,latency_ms,loss_pct,ctrl_overhead_pct"
    ));
    assert_eq!(report.lines().count(), 1 + 8 * 3);
}

#[test]
fn seed_override_changes_the_run_and_repeats_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", &[]);
    let mut reports = Vec::new();
    for (sub, seed) in [("a", "11"), ("b", "11"), ("c", "12")] {
        let o = dir.path().join(sub);
        let out = run(&mut dflshield(&["run", "--config", s(&cfg), "--seed", seed, "--out", s(&o)]));
        assert!(out.status.success());
        reports.push(std::fs::read(o.join("frames.jsonl")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_ne!(reports[0], reports[2]);
}

#[test]
fn zero_round_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty", &[("rounds = 3", "rounds = 0")]);
    let out = run(&mut dflshield(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]));
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("o/report.csv").is_file());
}

#[test]
fn aborted_run_exits_1_with_incomplete_marker() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lossy", &[("loss_rate = 0.0", "loss_rate = 0.99")]);
    let o = dir.path().join("o");
    let out = run(&mut dflshield(&["run", "--config", s(&cfg), "--out", s(&o)]));
    assert_eq!(out.status.code(), Some(1));
    let marker = std::fs::read_to_string(o.join("INCOMPLETE")).unwrap();
    assert!(!marker.trim().is_empty());
}

#[test]
fn matrix_and_compare_order_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", &[]);
    let o = dir.path().join("m");
    let out = run(&mut dflshield(&["run", "--config", s(&cfg), "--matrix", "--out", s(&o)]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["comparison.csv", "f1_curve.csv", "threat_matrix.csv"] {
        assert!(o.join(f).is_file(), "missing {f}");
    }

    let cmp = dir.path().join("cmp");
    let out = run(&mut dflshield(&[
        "compare",
        s(&o.join("EncryptionMtd")),
        s(&o.join("Baseline/report.csv")),
        s(&o.join("Encryption")),
        "--out",
        s(&cmp),
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    let b = table.find("Baseline").unwrap();
    let e = table.find("Encryption ").unwrap();
    let m = table.find("EncryptionMtd").unwrap();
    assert!(b < e && e < m, "{table}");

    let csv = std::fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",up,") && rows[2].contains(",up,"), "{csv}");
    let curve = std::fs::read_to_string(cmp.join("f1_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("config,round,nodes,f1_mean,f1_sd"));
    assert_eq!(curve.lines().count(), 1 + 3 * 3);
}

#[test]
fn compare_rejects_malformed_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    std::fs::write(&a, "not,a,report\n1,2,3\n").unwrap();
    let out = run(&mut dflshield(&["compare", s(&a), s(&a)]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tcp_backend_with_child_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tcp", &[("nodes = 8", "nodes = 4"), ("security = \"Baseline\"", "security = \"Encryption\"")]);
    let o = dir.path().join("t");
    let out = run(&mut dflshield(&["run", "--config", s(&cfg), "--backend", "tcp", "--out", s(&o)]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(o.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["reports"], 12);
    assert!(!o.join(".launch.toml").exists());
    assert!(!o.join("frames.jsonl").exists());
}
