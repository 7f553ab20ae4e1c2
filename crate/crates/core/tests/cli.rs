//! End-to-end runs of the `melt` binary.

use std::path::Path;
use std::process::{Command, Output};

use melt::corpus::write_jsonl;
use melt::synth::{stance_corpus, theme_corpus, StanceSynthConfig, ThemeConfig};

const SMALL: [&str; 8] = ["--d-model", "16", "--ff-dim", "32", "--heads", "2", "--buckets", "512"];

fn melt(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_melt"));
    for (k, _) in std::env::vars() {
        if k.starts_with("MELT_") {
            cmd.env_remove(k);
        }
    }
    cmd.current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = melt(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap()
}

fn theme_file(dir: &Path, users: usize, per_user: usize) {
    let msgs = theme_corpus(&ThemeConfig {
        users,
        messages_per_user: per_user,
        ..ThemeConfig::default()
    });
    write_jsonl(&dir.join("corpus.jsonl"), &msgs).unwrap();
}

#[test]
fn prep_chunks_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theme_file(d, 10, 95);
    ok(d, &["prep", "--input", "corpus.jsonl", "--out", "a", "--dev-users", "0"]);
    let stats: serde_json::Value = serde_json::from_slice(&read(d, "a/stats.json")).unwrap();
    assert_eq!(stats["chunks"], 30);
    assert_eq!(stats["users"], 10);
    ok(d, &["prep", "--input", "corpus.jsonl", "--out", "b", "--dev-users", "0"]);
    assert_eq!(read(d, "a/chunks.jsonl"), read(d, "b/chunks.jsonl"));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    assert_eq!(code(&melt(d, &["prep", "--input", "empty.jsonl", "--out", "o"])), 2);
    assert_eq!(code(&melt(d, &["prep", "--input", "missing.jsonl", "--out", "o"])), 2);
    std::fs::write(d.join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    theme_file(d, 3, 50);
    let out = melt(d, &["--config", "bad.toml", "prep", "--input", "corpus.jsonl", "--out", "o"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn numeric_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theme_file(d, 6, 60);
    ok(d, &["prep", "--input", "corpus.jsonl", "--out", "p", "--dev-users", "2", "--dev-messages", "20"]);
    let args = with(
        &["pretrain", "--data", "p", "--out", "t", "--epochs", "1", "--lr", "1e38", "--warmup", "0"],
        &SMALL,
    );
    let out = melt(d, &args);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_finetune_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = stance_corpus(&StanceSynthConfig {
        users: 30,
        history_per_user: 20,
        ..Default::default()
    });
    write_jsonl(&d.join("history.jsonl"), &s.history).unwrap();
    write_jsonl(&d.join("train.jsonl"), &s.records[..20]).unwrap();
    write_jsonl(&d.join("dev.jsonl"), &s.records[20..]).unwrap();

    ok(d, &["prep", "--input", "history.jsonl", "--out", "p", "--dev-users", "3", "--dev-messages", "10"]);
    let pre = with(&["--seed", "4", "pretrain", "--data", "p", "--out", "t", "--epochs", "1", "--batch-size", "4"], &SMALL);
    let text = ok(d, &pre);
    assert!(text.contains("# resolved configuration"));
    let pre2 = with(&["--seed", "4", "pretrain", "--data", "p", "--out", "t2", "--epochs", "1", "--batch-size", "4"], &SMALL);
    ok(d, &pre2);
    assert_eq!(read(d, "t/checkpoint.melt"), read(d, "t2/checkpoint.melt"));

    let ft = [
        "finetune", "--checkpoint", "t/checkpoint.melt", "--train", "train.jsonl", "--dev", "dev.jsonl", "--history",
        "history.jsonl", "--out", "f", "--history-len", "10", "--max-epochs", "2", "--pooled",
    ];
    ok(d, &ft);
    let preds = String::from_utf8(read(d, "f/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 10);

    let table = ok(d, &["evaluate", "--predictions", "f/predictions.csv", "--gold", "dev.jsonl", "--pooled"]);
    assert!(table.contains("All(Pooled)"));
    let wrong = melt(d, &["evaluate", "--predictions", "f/predictions.csv", "--gold", "train.jsonl"]);
    assert_eq!(code(&wrong), 2);

    // The echoed configuration reproduces the run.
    let ft_again = [
        "--config", "f/config.toml", "finetune", "--checkpoint", "t/checkpoint.melt", "--train", "train.jsonl", "--dev",
        "dev.jsonl", "--history", "history.jsonl", "--out", "g", "--pooled",
    ];
    ok(d, &ft_again);
    assert_eq!(read(d, "f/predictions.csv"), read(d, "g/predictions.csv"));
}

#[test]
fn environment_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    theme_file(d, 4, 50);
    std::fs::write(d.join("c.toml"), "[prep]\ndev_messages = 5\n").unwrap();
    ok(d, &["--config", "c.toml", "prep", "--input", "corpus.jsonl", "--out", "a"]);
    assert!(String::from_utf8(read(d, "a/config.toml")).unwrap().contains("dev_messages = 5"));
    let out = Command::new(env!("CARGO_BIN_EXE_melt"))
        .current_dir(d)
        .env("MELT_DEV_MESSAGES", "7")
        .args(["--config", "c.toml", "prep", "--input", "corpus.jsonl", "--out", "b"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(read(d, "b/config.toml")).unwrap().contains("dev_messages = 7"));
}

#[test]
fn baselines_run_without_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = stance_corpus(&StanceSynthConfig {
        users: 24,
        history_per_user: 10,
        ..Default::default()
    });
    write_jsonl(&d.join("history.jsonl"), &s.history).unwrap();
    write_jsonl(&d.join("train.jsonl"), &s.records[..16]).unwrap();
    write_jsonl(&d.join("dev.jsonl"), &s.records[16..]).unwrap();
    for arch in ["mfc", "word", "word-history"] {
        let args = with(
            &[
                "finetune", "--arch", arch, "--train", "train.jsonl", "--dev", "dev.jsonl", "--history", "history.jsonl",
                "--out", arch, "--max-epochs", "1", "--pooled",
            ],
            &SMALL,
        );
        ok(d, &args);
        assert!(d.join(arch).join("metrics.csv").exists(), "{arch}");
    }
    let missing = melt(d, &["finetune", "--train", "train.jsonl", "--dev", "dev.jsonl", "--out", "x"]);
    assert_eq!(code(&missing), 2);
}
