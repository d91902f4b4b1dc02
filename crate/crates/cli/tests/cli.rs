use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_eyetrack");

const TINY: [&str; 12] = [
    "--set", "synth.train_users=2",
    "--set", "synth.val_users=1",
    "--set", "synth.samples_per_user=12",
    "--set", "synth.patch_height=8",
    "--set", "synth.patch_width=16",
    "--set", "model.arch=tiny",
];

fn run(args: &[&str]) -> (Output, Value) {
    let out = Command::new(BIN).args(args).output().unwrap();
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(stdout.lines().count(), 1, "exactly one JSON line expected, got {stdout:?}");
    let v = serde_json::from_str(stdout.trim()).unwrap();
    (out, v)
}

fn ok(args: &[&str]) -> Value {
    let (out, v) = run(args);
    assert!(out.status.success(), "{args:?}: {v}");
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let (out, v) = run(&["bench", "--out", "x.csv", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(v["error"]["kind"], "usage");
}

#[test]
fn unknown_config_key_in_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[stage1]\nepochs = 2\nwarmup = 1\n").unwrap();
    let (out, v) = run(&["--config", p(&cfg), "bench", "--out", p(&dir.path().join("b.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("stage1.warmup"));
}

#[test]
fn missing_dataset_is_a_runtime_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let (out, v) = run(&["pose", "--data", p(&dir.path().join("none")), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(v["error"]["command"], "pose");
    assert!(!v["error"]["causes"].as_array().unwrap().is_empty());
}

#[test]
fn adapt_then_append_grows_the_support() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&[&["synth", "--out", p(&data)], &TINY[..]].concat());
    let manifest = data.join("manifest.json");
    ok(&[&["pretrain", "--data", p(&manifest), "--out", p(&d.join("m")), "--set", "stage1.epochs=1"], &TINY[..]].concat());
    let model = d.join("m").join("stage1.eytc");
    let first = d.join("a.eytc");
    let cache = d.join("emb.eytc");
    let rec = ok(&[
        &["adapt", "--data", p(&manifest), "--model", p(&model), "--user", "u02", "--k", "9", "--out", p(&first), "--cache", p(&cache)],
        &TINY[..],
    ]
    .concat());
    assert_eq!(rec["metrics"]["support_size"], 9);
    assert!(rec["outputs"].as_object().unwrap().keys().any(|k| k.ends_with("a.eytc")));
    let rec = ok(&[
        &[
            "adapt", "--data", p(&manifest), "--model", p(&model), "--user", "u02", "--from", "9", "--k", "3",
            "--append", p(&first), "--out", p(&d.join("b.eytc")), "--cache", p(&cache),
        ],
        &TINY[..],
    ]
    .concat());
    assert_eq!(rec["metrics"]["support_size"], 12);

    // Too few frames left for the request.
    let (out, v) = run(&[
        &["adapt", "--data", p(&manifest), "--model", p(&model), "--user", "u02", "--from", "20", "--k", "9", "--out", p(&d.join("c.eytc"))],
        &TINY[..],
    ]
    .concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(v["error"]["message"].as_str().unwrap().contains("open-eye frames"));
}

#[test]
fn report_plots_filtered_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("log.csv");
    std::fs::write(&csv, "epoch,split,total\n0,train,3\n0,val,4\n1,train,2\n1,val,1.5\n").unwrap();
    let svg = dir.path().join("r.svg");
    ok(&["report", "--csv", p(&csv), "--x", "epoch", "--y", "total", "--filter", "split=val", "--out", p(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("polyline"));
    let (out, _) = run(&["report", "--csv", p(&csv), "--x", "epoch", "--y", "nope", "--out", p(&svg)]);
    assert_eq!(out.status.code(), Some(1));
}
