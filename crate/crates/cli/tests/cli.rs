//! Black-box tests of the `flowlab` binary: argument handling, exit codes,
//! and on-disk artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn flowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(args)
        .output()
        .expect("spawn flowlab")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_and_sample_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "mix.json",
        r#"{"task": "mixture", "steps": 5, "batch": 4}"#,
    );
    let out_dir = dir.path().join("run");
    let out = flowlab(&["train-fm", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "train-fm failed: {}", stderr(&out));
    let ckpt = out_dir.join("model.ffck");
    assert!(ckpt.exists());
    assert!(out_dir.join("metrics.csv").exists());

    let sample_dir = dir.path().join("samples");
    let out = flowlab(&[
        "sample",
        "--config",
        &cfg,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--mode",
        "ode",
        "--n",
        "8",
        "--out",
        sample_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "sample failed: {}", stderr(&out));
    assert!(sample_dir.join("points.csv").exists());
    assert!(sample_dir.join("summary.json").exists());
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "mix.json",
        r#"{"task": "mixture", "steps": 0}"#,
    );
    let out_dir = dir.path().join("run");
    let out = flowlab(&["train-fm", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("model.ffck").exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "expected header only: {metrics:?}");
}

#[test]
fn invalid_config_exits_1_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"task": "mixture", "model": {"layers": 2, "heads": 2, "head_dim": 8, "hidden": 16, "ffn_mult": 4.0, "patch": 1, "token_dim": 4, "vocab": 64, "rope": {"head_dim": 8, "axis_split": [2, 1, 1], "base": 10000.0}}}"#,
    );
    let out_dir = dir.path().join("run");
    let out = flowlab(&["train-fm", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("token_dim"));
    assert!(!out_dir.exists(), "no output should be written on invalid config");
}

#[test]
fn missing_config_exits_1() {
    let out = flowlab(&["train-fm", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn malformed_pairs_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "glyph.json",
        r#"{"task": "glyph", "steps": 0}"#,
    );
    let ckpt_dir = dir.path().join("init");
    let out = flowlab(&["train-fm", "--config", &cfg, "--out", ckpt_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = ckpt_dir.join("model.ffck");

    let pairs = dir.path().join("pairs.jsonl");
    std::fs::write(
        &pairs,
        "{\"prompt\": [0], \"win\": [0.0], \"lose\": [0.0]}\nnot json at all\n",
    )
    .unwrap();
    let out = flowlab(&[
        "train-dpo",
        "--config",
        &cfg,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
        "--out",
        dir.path().join("dpo").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("line 2"),
        "expected line number in: {}",
        stderr(&out)
    );
}

#[test]
fn divergent_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "diverge.json",
        r#"{"task": "mixture", "steps": 50, "batch": 4, "optimizer": {"name": "adam", "lr": 1e300, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "grad_clip": null}}"#,
    );
    let out_dir = dir.path().join("run");
    let out = flowlab(&["train-fm", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "glyph.json", r#"{"task": "glyph"}"#);
    let out_dir = dir.path().join("gc");
    let out = flowlab(&["gradcheck", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("gradcheck.json").exists());

    let out = flowlab(&[
        "gradcheck",
        "--config",
        &cfg,
        "--out",
        dir.path().join("gc2").to_str().unwrap(),
        "--corrupt",
        "0.01",
    ]);
    assert_eq!(code(&out), 3, "corrupted gradients must exit 3");
}

#[test]
fn seed_override_changes_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "mix.json",
        r#"{"task": "mixture", "steps": 5, "batch": 4}"#,
    );
    let run = |seed: &str, name: &str| -> Vec<u8> {
        let out_dir = dir.path().join(name);
        let out = flowlab(&[
            "train-fm",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(out_dir.join("model.ffck")).unwrap()
    };
    let a = run("1", "a");
    let b = run("1", "b");
    let c = run("2", "c");
    assert_eq!(a, b, "same seed must reproduce the checkpoint");
    assert_ne!(a, c, "different seed must change the checkpoint");
}
