//! The command-line pipeline, driven through the built binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use attend_gan::checkpoint::Checkpoint;
use attend_gan::metrics::MetricReport;
use attend_gan::trainer::TrainLog;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attend-gan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    let lines: Vec<&str> = err.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "expected a single error line, got {err:?}");
    lines[0].to_string()
}

/// A configuration small enough for a few seconds per stage.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let cfg = serde_json::json!({
        "model": {
            "embed_dim": 8,
            "hidden_dim": 12,
            "attention_dim": 8,
            "max_len": 16,
            "critic_embed_dim": 6,
            "critic_windows": [1, 2, 3],
            "critic_filters": 4
        },
        "train": {
            "gen_lr": 3e-3,
            "gen_batch": 8,
            "critic_batch": 8,
            "pretrain_epochs": 2,
            "critic_pretrain_steps": 4,
            "adversarial_epochs": 1,
            "rollouts": 2,
            "seed": 5
        }
    });
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    ok(&["synth", "--out", s(&a), "--seed", "1", "--scenes", "20"]);
    ok(&["synth", "--out", s(&b), "--seed", "1", "--scenes", "20"]);
    ok(&["synth", "--out", s(&c), "--seed", "2", "--scenes", "20"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn failures_print_one_parseable_line() {
    let out = bin(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error[usage]: "));

    let out = bin(&["synth", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert!(line.starts_with("error[usage]: ") && line.contains("--out"), "{line}");

    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"gen_lr": 1e-3, "warp_factor": 9}}"#).unwrap();
    let out = bin(&["pretrain-gen", "--config", s(&cfg), "--data", "x", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let line = error_line(&out);
    assert!(line.starts_with("error[config]: ") && line.contains("warp_factor"), "{line}");

    // Validation happens before anything is written.
    let out_dir = dir.path().join("never");
    fs::write(&cfg, r#"{"train": {"gen_batch": 0}}"#).unwrap();
    let out = bin(&["pretrain-gen", "--config", s(&cfg), "--data", "x", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).starts_with("error[config]: "));
    assert!(!out_dir.exists());

    assert!(bin(&["--help"]).status.success());
}

#[test]
fn evaluate_references_against_themselves() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    ok(&["synth", "--out", s(&data), "--seed", "3", "--scenes", "12", "--style", "factual"]);
    // One reference per image, reused as the candidate.
    let mut refs = String::new();
    let mut cands = String::new();
    for line in fs::read_to_string(&data).unwrap().lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        v["captions"].as_array_mut().unwrap().truncate(1);
        cands.push_str(
            &serde_json::json!({"image_id": v["image_id"], "tokens": v["captions"][0]["tokens"]}).to_string(),
        );
        cands.push('\n');
        refs.push_str(&v.to_string());
        refs.push('\n');
    }
    let refs_path = dir.path().join("refs.jsonl");
    let cand_path = dir.path().join("cands.jsonl");
    fs::write(&refs_path, refs).unwrap();
    fs::write(&cand_path, cands).unwrap();
    let report = dir.path().join("report.json");
    ok(&["evaluate", "--candidates", s(&cand_path), "--references", s(&refs_path), "--report", s(&report)]);
    let r = MetricReport::load(&report).unwrap();
    for b in [r.bleu_1, r.bleu_2, r.bleu_3, r.bleu_4, r.rouge_l] {
        assert!((b - 100.0).abs() < 1e-9, "{b}");
    }
}

#[test]
fn full_pipeline_smoke() {
    let started = Instant::now();
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let data = d.join("d.jsonl");
    let (gen, disc, adv) = (d.join("gen"), d.join("disc"), d.join("adv"));
    ok(&["synth", "--out", s(&data), "--scenes", "10", "--seed", "4"]);
    ok(&["pretrain-gen", "--config", s(&cfg), "--data", s(&data), "--out-dir", s(&gen)]);
    ok(&[
        "pretrain-disc",
        "--config", s(&cfg),
        "--data", s(&data),
        "--gen-checkpoint", s(&gen.join("best.ckpt")),
        "--out-dir", s(&disc),
    ]);
    ok(&[
        "adversarial",
        "--config", s(&cfg),
        "--data", s(&data),
        "--gen-checkpoint", s(&gen.join("best.ckpt")),
        "--disc-checkpoint", s(&disc.join("critic.ckpt")),
        "--out-dir", s(&adv),
    ]);
    let ck = Checkpoint::load(&adv.join("best.ckpt")).unwrap();
    let critic = ck.state.critic.as_ref().unwrap();
    assert!(critic.max_abs() <= 0.01);
    let log = TrainLog::load_csv(adv.join("log.csv")).unwrap();
    assert!(log.records.iter().any(|r| r.l1.is_some()));
    assert!(log.records.iter().any(|r| r.critic_loss.is_some()));

    // The 10-scene corpus has a single styled test image, too few for
    // CIDEr-D, so the training images are captioned.
    let cands = d.join("cands.jsonl");
    let report = d.join("report.json");
    for mode in ["greedy", "multinomial"] {
        ok(&[
            "sample",
            "--checkpoint", s(&adv.join("best.ckpt")),
            "--data", s(&data),
            "--mode", mode,
            "--split", "train",
            "--out", s(&cands),
        ]);
        let out = ok(&[
            "evaluate",
            "--candidates", s(&cands),
            "--references", s(&data),
            "--report", s(&report),
            "--style", "positive",
        ]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("CIDEr-D"));
        let r = MetricReport::load(&report).unwrap();
        assert!(r.is_valid());
        assert!(r.images >= 2);
    }
    assert!(started.elapsed().as_secs() < 300);
}

/// Pretraining cut after one epoch and resumed gives the same rows and the
/// same parameters as an uninterrupted run.
#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let data = d.join("d.jsonl");
    ok(&["synth", "--out", s(&data), "--scenes", "10", "--seed", "6"]);
    let (full, cut) = (d.join("full"), d.join("cut"));
    let common = |out: &Path| -> Vec<String> {
        ["pretrain-gen", "--config", s(&cfg), "--data", s(&data), "--out-dir", s(out)]
            .map(String::from)
            .to_vec()
    };
    let run = |mut args: Vec<String>, extra: &[&str]| {
        args.extend(extra.iter().map(|x| x.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };
    run(common(&full), &["--epochs", "3"]);
    run(common(&cut), &["--epochs", "1"]);
    run(common(&cut), &["--epochs", "3", "--resume", s(&cut.join("epoch-001.ckpt"))]);

    let a = TrainLog::load_csv(full.join("log.csv")).unwrap();
    let b = TrainLog::load_csv(cut.join("log.csv")).unwrap();
    assert_eq!(a.records, b.records);
    for name in ["epoch-003.ckpt", "best.ckpt"] {
        let x = Checkpoint::load(&full.join(name)).unwrap();
        let y = Checkpoint::load(&cut.join(name)).unwrap();
        assert_eq!(x.state, y.state, "{name}");
    }
    // Same config and seed: the final checkpoint files are identical.
    let again = d.join("again");
    run(common(&again), &["--epochs", "3"]);
    let strip = |p: PathBuf| {
        let mut c = Checkpoint::load(&p).unwrap();
        c.run = serde_json::Value::Null;
        c.to_bytes().unwrap()
    };
    assert_eq!(strip(full.join("best.ckpt")), strip(again.join("best.ckpt")));
}
