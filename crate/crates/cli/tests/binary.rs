//! End-to-end behaviour of the `bnn` binary: subcommands and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnn"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_compare_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("conjugate_mh.json");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(bnn(&["run", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(bnn(&["run", "--config", s(&cfg), "--out", s(&b), "--seed", "99"]).status.success());
    for f in ["config.json", "run.json", "metrics.json", "predictions.json", "curve.csv", "trace.csv"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }

    let table = tmp.path().join("table.csv");
    assert!(bnn(&["compare", s(&a), s(&b), "--out", s(&table)]).status.success());
    let text = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("run,status,method,dataset,dataset_hash"));
    assert_ne!(rows[1].split_once(',').unwrap().1, rows[2].split_once(',').unwrap().1);

    let out = bnn(&["inspect", s(&a)]);
    assert!(out.status.success());
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("method     mh"), "{summary}");
}

#[test]
fn config_echo_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let cfg = configs().join("conjugate_bbb.json");
    assert!(bnn(&["run", "--config", s(&cfg), "--out", s(&first)]).status.success());
    // The echo has an absolute data path, so it reruns from anywhere.
    let echo = first.join("config.json");
    assert!(bnn(&["run", "--config", s(&echo), "--out", s(&second)]).status.success());
    for f in ["metrics.json", "predictions.json", "trace.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn generate_writes_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("moons.csv");
    let cfg = configs().join("generate_moons.json");
    assert!(bnn(&["generate", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("x0,x1,label"));
    assert!(text.lines().count() > 10);
}

#[test]
fn bad_configs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("conjugate_mh.json")).unwrap()).unwrap();
    value["surprise"] = serde_json::json!(1);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, value.to_string()).unwrap();
    let out = bnn(&["run", "--config", s(&bad), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let missing = tmp.path().join("absent.json");
    let out = bnn(&["run", "--config", s(&missing), "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three_and_keeps_the_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("sinusoid_swag.json")).unwrap()).unwrap();
    value["method"]["learning_rate"] = serde_json::json!(10.0);
    value["method"].as_object_mut().unwrap().remove("pretrain");
    if let Some(path) = value["data"]["csv"]["path"].as_str() {
        let abs = configs().join(path);
        value["data"]["csv"]["path"] = serde_json::json!(abs);
    }
    let cfg = tmp.path().join("diverge.json");
    fs::write(&cfg, value.to_string()).unwrap();
    let run = tmp.path().join("run");
    let out = bnn(&["run", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("config.json").is_file());
}
