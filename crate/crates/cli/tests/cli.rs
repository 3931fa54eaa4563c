use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
  "sft_steps": 4, "sft_batch": 2, "sft_predicted_conditioning_warmup": 2, "sft_log_every": 2,
  "rl_steps": 2, "group_size": 2
}"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclegrpo")).args(args).output().expect("spawn cyclegrpo")
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Asserts a failure that reports exactly one JSON error line; returns its kind.
fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert!(v["error"]["message"].is_string());
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn gen(dir: &TempDir, name: &str, tier: &str, count: &str, seed: &str) -> String {
    let out = p(dir, name);
    ok(&["gen-data", "--tier", tier, "--count", count, "--out", &out, "--seed", seed]);
    out
}

#[test]
fn gen_data_is_seeded() {
    let dir = TempDir::new().unwrap();
    let a = gen(&dir, "a.jsonl", "all", "9", "3");
    let b = gen(&dir, "b.jsonl", "all", "9", "3");
    let c = gen(&dir, "c.jsonl", "all", "9", "4");
    let read = |f: &str| std::fs::read(f).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(String::from_utf8(read(&a)).unwrap().lines().count(), 9);
}

#[test]
fn usage_errors_are_json() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.jsonl", "simple", "2", "0");
    let out = cli(&["rl", "--data", &data, "--out", &p(&dir, "x.ckpt")]);
    assert_eq!(error_kind(&out), "usage");
    assert_eq!(error_kind(&cli(&["no-such-command"])), "usage");
}

#[test]
fn runtime_errors_are_json() {
    let dir = TempDir::new().unwrap();
    let missing = p(&dir, "missing.jsonl");
    let out = cli(&["eval", "--checkpoint", &missing, "--data", &missing, "--report", &p(&dir, "r.json")]);
    assert_eq!(error_kind(&out), "io");

    let bad_cfg = p(&dir, "bad.json");
    std::fs::write(&bad_cfg, r#"{"sft_stepz": 1}"#).unwrap();
    let out = cli(&["vocab", "--out", &p(&dir, "v.tsv"), "--config", &bad_cfg]);
    assert_eq!(error_kind(&out), "config");

    let junk = p(&dir, "junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let data = gen(&dir, "d.jsonl", "simple", "2", "0");
    let out = cli(&["eval", "--checkpoint", &junk, "--data", &data, "--report", &p(&dir, "r.json")]);
    assert_eq!(error_kind(&out), "checkpoint");
}

#[test]
fn vocab_and_dataset_render() {
    let dir = TempDir::new().unwrap();
    let vocab = p(&dir, "vocab.tsv");
    ok(&["vocab", "--out", &vocab]);
    assert_eq!(std::fs::read_to_string(&vocab).unwrap().lines().count(), 37);

    let data = gen(&dir, "d.jsonl", "regular", "3", "1");
    let imgs = p(&dir, "imgs");
    ok(&["render", "--dataset", &data, "--out-dir", &imgs, "--scale", "2"]);
    let files: Vec<_> = std::fs::read_dir(&imgs).unwrap().collect();
    assert_eq!(files.len(), 3);
    for f in files {
        let bytes = std::fs::read(f.unwrap().path()).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
    }
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--samples", "40"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], Value::Bool(true));
    // An impossible tolerance turns the same run into a failure.
    let out = cli(&["grad-check", "--samples", "40", "--tolerance", "1e-30"]);
    assert_eq!(error_kind(&out), "contract");
}

#[test]
fn train_evaluate_and_render_pipeline() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let train = gen(&dir, "train.jsonl", "simple", "6", "0");
    let held = gen(&dir, "held.jsonl", "all", "3", "9");

    let sft = p(&dir, "sft.ckpt");
    let sft_metrics = p(&dir, "sft.jsonl");
    ok(&["sft", "--data", &train, "--out", &sft, "--metrics", &sft_metrics, "--config", &cfg, "--threads", "1"]);
    assert!(Path::new(&sft).exists());
    let lines = std::fs::read_to_string(&sft_metrics).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let rl = p(&dir, "rl.ckpt");
    let rl_metrics = p(&dir, "rl.jsonl");
    let out = ok(&[
        "rl", "--sft-checkpoint", &sft, "--data", &train, "--mode", "no-cycle", "--out", &rl,
        "--metrics", &rl_metrics, "--config", &cfg,
    ]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["mode"], "no-cycle");
    for line in std::fs::read_to_string(&rl_metrics).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for key in ["step", "direction", "mode", "rewards", "advantages", "loss", "kl", "grad_norm"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
    }

    let report = p(&dir, "report.json");
    ok(&["eval", "--checkpoint", &rl, "--data", &held, "--report", &report, "--config", &cfg]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["pooled"]["mean_r1"].is_number());
    assert_eq!(v["tiers"].as_object().unwrap().len(), 3);

    let imgs = p(&dir, "decodes");
    ok(&["render", "--checkpoint", &rl, "--data", &held, "--out-dir", &imgs, "--limit", "2"]);
    assert_eq!(std::fs::read_dir(&imgs).unwrap().count(), 6);
}
