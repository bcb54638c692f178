use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pintune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pintune"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pintune(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pintune(dir, args).status.code().expect("exit code")
}

const SMALL: &[&str] = &[
    "--set",
    "d=8",
    "--set",
    "d1=12",
    "--set",
    "layers=2",
    "--set",
    "d2=3",
    "--set",
    "pretrain_steps=3",
    "--set",
    "pretrain_batch=16",
    "--set",
    "shots=2",
    "--set",
    "query=4",
    "--set",
    "batch=2",
    "--set",
    "steps=3",
    "--set",
    "eval_seeds=1",
    "--set",
    "max_seen=2",
];

fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

/// Synthetic data plus a pre-trained checkpoint and its Fisher file.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--out-dir", "ds", "--molecules", "150"]);
    ok(p, &with(&["pretrain", "--data", "ds/data.jsonl", "--out", "pre.json"]));
    ok(
        p,
        &with(&[
            "fisher",
            "--data",
            "ds/data.jsonl",
            "--ckpt",
            "pre.json",
            "--out",
            "fisher.json",
        ]),
    );
    dir
}

const TUNE: &[&str] = &[
    "tune",
    "--data",
    "ds/data.jsonl",
    "--tasks",
    "ds/tasks.json",
    "--ckpt",
    "pre.json",
    "--out",
    "pin.json",
    "--log",
    "pin.jsonl",
];

#[test]
fn end_to_end_smoke() {
    let dir = prepared();
    let p = dir.path();
    let mut args = TUNE.to_vec();
    args.extend(["--fisher", "fisher.json", "--penalty", "efim"]);
    ok(p, &with(&args));
    let log = std::fs::read_to_string(p.join("pin.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let out = ok(
        p,
        &with(&[
            "eval",
            "--data",
            "ds/data.jsonl",
            "--tasks",
            "ds/tasks.json",
            "--ckpt",
            "pin.json",
            "--report",
            "rep.json",
            "--dump-embeddings",
            "emb.jsonl",
        ]),
    );
    assert!(out.contains("mean ROC-AUC"));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(p.join("rep.json")).unwrap()).unwrap();
    let props = rep["properties"].as_object().unwrap();
    assert_eq!(props.len(), 2);
    for r in props.values() {
        let auc = r["mean_auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    assert!(std::fs::read_to_string(p.join("emb.jsonl")).unwrap().lines().count() > 1);
}

#[test]
fn fisher_penalties_require_a_fisher_file() {
    let dir = prepared();
    let mut args = TUNE.to_vec();
    args.extend(["--penalty", "fim"]);
    assert_eq!(code(dir.path(), &with(&args)), 2);
}

#[test]
fn width_mismatch_is_a_data_error() {
    let dir = prepared();
    let mut args = with(TUNE);
    args.extend(["--fisher", "fisher.json", "--set", "d=16"]);
    assert_eq!(code(dir.path(), &args), 3);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(p, &["count-params", "--set", "bogus=1"]), 2);
    assert_eq!(code(p, &["pretrain", "--out", "x.json"]), 2);
    assert_eq!(code(p, &["count-params", "--config", "missing.json"]), 2);
}

#[test]
fn count_params_reports_the_reference_delta() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "count-params",
            "--set",
            "d=300",
            "--set",
            "d1=600",
            "--set",
            "layers=5",
            "--set",
            "d2=50",
        ],
    );
    assert!(out.contains("1,652,750"), "{out}");
    let json = ok(dir.path(), &["count-params", "--json", "--set", "context=false"]);
    let v: Value = serde_json::from_str(&json).unwrap();
    assert!(v["full"].is_object() && v["pin"].is_object());
}
