use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "[model]\nlayers = 1\nhidden = 16\nheads = 2\nff = 32\ndropout = 0.0\n\n[train]\nepochs = 2\nbatch_size = 8\n";

fn sead(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sead"))
        .current_dir(dir)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn corpus(dir: &Path) {
    ok(sead(dir, &["--seed", "3", "gen-synthetic", "--n-tables", "4", "--n-train", "24", "--n-dev", "4", "--n-test", "6", "--out", "data"]));
}

#[test]
fn gen_synthetic_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let d = dir.path().join("data");
    assert_eq!(jsonl(&d.join("train.jsonl")).len(), 24);
    assert_eq!(jsonl(&d.join("dev.jsonl")).len(), 4);
    assert_eq!(jsonl(&d.join("test.jsonl")).len(), 6);
    assert_eq!(jsonl(&d.join("tables.jsonl")).len(), 4);
    let first = fs::read_to_string(d.join("train.jsonl")).unwrap();
    ok(sead(dir.path(), &["--seed", "3", "gen-synthetic", "--n-tables", "4", "--n-train", "24", "--n-dev", "4", "--n-test", "6", "--out", "again"]));
    assert_eq!(first, fs::read_to_string(dir.path().join("again/train.jsonl")).unwrap());
}

#[test]
fn augment_writes_one_instance_per_example() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let base = ["augment", "--tables", "data/tables.jsonl", "--in", "data/train.jsonl", "--seed", "5"];
    ok(sead(dir.path(), &[&base[..], &["--p-shuffle", "1.0", "--p-swap", "0.0", "--infilling", "--out", "a.jsonl"]].concat()));
    let lines = jsonl(&dir.path().join("a.jsonl"));
    assert_eq!(lines.len(), 24);
    for l in &lines {
        assert_eq!(l["reconstruction"], Value::Bool(true));
        assert!(l["source"].is_string() && l["target"].is_string() && l["direction"].is_string());
    }
    let bad = sead(dir.path(), &[&base[..], &["--p-drop", "1.5", "--out", "b.jsonl"]].concat());
    assert!(!bad.status.success());
}

#[test]
fn train_decode_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];
    let train = ["train", "--tables", "data/tables.jsonl", "--train", "data/train.jsonl", "--dev", "data/dev.jsonl", "--out", "m"];
    let stdout = ok(sead(dir.path(), &[&cfg[..], &train[..]].concat()));
    assert!(stdout.contains("trained 2 epochs"), "{stdout}");
    for f in ["model.ckpt", "vocab.txt", "config.toml", "train_report.json"] {
        assert!(dir.path().join("m").join(f).exists(), "{f} missing");
    }

    let decode = ["decode", "--model", "m", "--tables", "data/tables.jsonl", "--in", "data/test.jsonl", "--eg", "cs", "--out", "pred.jsonl"];
    ok(sead(dir.path(), &decode));
    let preds = jsonl(&dir.path().join("pred.jsonl"));
    assert_eq!(preds.len(), 6);
    assert!(preds.iter().all(|p| p["degraded"].is_boolean() && p["tokens"].is_string()));

    let eval = ["eval", "--model", "m", "--tables", "data/tables.jsonl", "--in", "data/test.jsonl", "--bleu", "--out", "report.json"];
    let table = ok(sead(dir.path(), &eval));
    assert!(table.contains("Acc_lf"), "{table}");
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], Value::from(6));
}

#[test]
fn strict_mode_exits_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut lines = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    lines.push_str("{\"question\": \"no sql here\"\n");
    fs::write(dir.path().join("broken.jsonl"), lines).unwrap();
    let args = ["ingest", "--tables", "data/tables.jsonl", "--examples", "broken.jsonl", "--out", "clean"];
    let strict = sead(dir.path(), &[&["--strict"][..], &args[..]].concat());
    assert_eq!(strict.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&strict.stderr));
    ok(sead(dir.path(), &args));
}
