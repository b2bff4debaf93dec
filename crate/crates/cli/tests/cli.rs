//! End-to-end runs of the `setinfer` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value as Json;

const TINY: &str = r#"
[model]
d = 16
heads = 2
layers = 1
aggregate_layers = 1
components = 3

[train]
steps = 20
batch_size = 2
val_every = 0
log_every = 0
"#;

fn setinfer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setinfer"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = setinfer(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Synthesise a bundle and train a tiny checkpoint on it.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["--seed", "1", "synth", "--family", "categorical-bayes-net", "--rows", "60", "--out", "copy.json"]);
    ok(d, &["--config", "tiny.toml", "train", "--data", "copy.json", "--out", "m.ckpt", "--curve", "train.jsonl"]);
    dir
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (seed, out) in [("3", "a.json"), ("3", "b.json"), ("4", "c.json")] {
        ok(d, &["--seed", seed, "synth", "--family", "mixed", "--rows", "30", "--out", out]);
    }
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
}

#[test]
fn eval_reports_one_entry_per_seed() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["eval", "--checkpoint", "m.ckpt", "--data", "copy.json", "--shots", "5", "--seeds", "3", "--out", "r.json"]);
    let report: Json = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 3);
    assert_eq!(report["shots"], 5);
    assert!(report["mean"]["nll"].as_f64().unwrap().is_finite());
}

#[test]
fn afa_respects_the_budget() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &[
        "afa", "--checkpoint", "m.ckpt", "--data", "copy.json", "--target", "y", "--budget", "3", "--rows", "10",
        "--out", "curve.jsonl", "--svg", "curve.svg",
    ]);
    let curve = std::fs::read_to_string(d.join("curve.jsonl")).unwrap();
    let steps: Vec<Json> = curve.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!steps.is_empty() && steps.len() <= 4, "{} points", steps.len());
    assert!(steps.iter().all(|p| (0.0..=1.0).contains(&p["metric"].as_f64().unwrap())));
    assert!(std::fs::read_to_string(d.join("curve.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn inspect_and_finetune_use_the_checkpoint() {
    let dir = prepared();
    let d = dir.path();
    let text = ok(d, &["inspect", "m.ckpt"]);
    assert!(text.contains("config digest"));
    ok(d, &["finetune", "--checkpoint", "m.ckpt", "--data", "copy.json", "--out", "f.ckpt", "--steps", "3"]);
    assert!(d.join("f.ckpt").exists());
    assert!(ok(d, &["inspect", "train.jsonl"]).contains("records"));
}

#[test]
fn author_infers_types_and_leaves_descriptions_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("t.csv"), "weight,colour,grade\n61.5,red,1\n80.25,blue,2\n55,red,1\n").unwrap();
    ok(d, &["author", "--csv", "t.csv", "--out", "t.sidecar.json"]);
    let sidecar: Json = serde_json::from_slice(&std::fs::read(d.join("t.sidecar.json")).unwrap()).unwrap();
    let features = sidecar["features"].as_array().unwrap();
    assert_eq!(features[0]["type"], "continuous");
    assert_eq!(features[0]["range"], serde_json::json!([55.0, 80.25]));
    assert_eq!(features[1]["choices"], serde_json::json!(["blue", "red"]));
    // Few distinct integers read as codes.
    assert_eq!(features[2]["type"], "categorical");
    assert!(features.iter().all(|f| f["desc"] == ""));
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!setinfer(d, &["synth", "--bogus-flag"]).status.success());
    assert!(!setinfer(d, &["synth", "--family", "no-such-family", "--out", "x.json"]).status.success());
    let out = setinfer(d, &["eval", "--checkpoint", "missing.ckpt", "--data", "missing.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
