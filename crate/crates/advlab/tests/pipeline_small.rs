//! End-to-end checks of the `lab` binary on a deliberately tiny
//! experiment: stage ordering, idempotence, manifest integrity and
//! byte-level reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lab_exe() -> &'static str {
    env!("CARGO_BIN_EXE_lab")
}

/// Tiny but structurally complete experiment; finishes in seconds.
fn tiny_config_json() -> String {
    serde_json::json!({
        "seed": 11,
        "corpus": { "n_train": 24, "n_dev": 8, "n_eval": 8 },
        "n_unlabeled": 6,
        "encoder": { "layers": 2, "model_dim": 8, "heads": 2, "ff_dim": 16, "input_dim": 80 },
        "pretrain": { "epochs": 1, "batch_size": 4 },
        "train": { "epochs": 1, "batch_size": 8 },
        "scratch_epochs": 1,
        "sweep": { "epsilons": [1.0, 8.0, 16.0], "steps": 2 },
        "lnsr_epsilons": [8.0, 16.0]
    })
    .to_string()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(&config, tiny_config_json()).unwrap();
    let out = tmp.path().join("run");
    Workspace {
        config,
        out,
        _tmp: tmp,
    }
}

fn run_lab(ws: &Workspace, stage: &str, threads: &str, force: bool) -> Output {
    let mut cmd = Command::new(lab_exe());
    cmd.arg(stage)
        .arg("--config")
        .arg(&ws.config)
        .arg("--out")
        .arg(&ws.out)
        .env("LAB_THREADS", threads)
        .env("RUST_LOG", "info");
    if force {
        cmd.arg("--force");
    }
    cmd.output().unwrap()
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "exit={:?}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn mtime(path: &Path) -> std::time::SystemTime {
    fs::metadata(path).unwrap().modified().unwrap()
}

#[test]
fn full_pipeline_is_idempotent_reproducible_and_tamper_evident() {
    let ws = workspace();

    // First full run produces the CSVs.
    assert_success(&run_lab(&ws, "all", "1", false));
    let curves_path = ws.out.join("evaluate/curves.csv");
    let lnsr_path = ws.out.join("lnsr/lnsr.csv");
    let curves = fs::read(&curves_path).unwrap();
    let lnsr = fs::read(&lnsr_path).unwrap();
    assert!(curves.starts_with(b"defender,algorithm,epsilon,accuracy,n_examples\n"));
    assert!(lnsr.starts_with(b"layer,arm,epsilon,lnsr_sum,lnsr_mean,n\n"));

    // Tiny grid: 7 defenders x 2 algorithms x (3 eps + clean) x 2
    // target architectures = 112 data rows.
    let rows = curves.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
    assert_eq!(rows, 1 + 7 * 2 * 4 * 2);

    // Second run: every stage skipped, heavyweight artifacts untouched.
    let suite_before = mtime(&ws.out.join("train/suite.json"));
    let encoder_before = mtime(&ws.out.join("pretrain/encoder.json"));
    assert_success(&run_lab(&ws, "all", "1", false));
    assert_eq!(mtime(&ws.out.join("train/suite.json")), suite_before);
    assert_eq!(mtime(&ws.out.join("pretrain/encoder.json")), encoder_before);
    assert_eq!(fs::read(&curves_path).unwrap(), curves);
    assert_eq!(fs::read(&lnsr_path).unwrap(), lnsr);

    // A fresh directory with the same config and a different thread
    // cap reproduces the CSVs byte for byte.
    let ws2 = workspace();
    assert_success(&run_lab(&ws2, "all", "2", false));
    assert_eq!(fs::read(ws2.out.join("evaluate/curves.csv")).unwrap(), curves);
    assert_eq!(fs::read(ws2.out.join("lnsr/lnsr.csv")).unwrap(), lnsr);

    // Tampering with a checkpoint invalidates its stage; the re-run
    // regenerates identical bytes and downstream stages still verify.
    let rand_encoder = ws.out.join("train/rand-encoder.json");
    let pristine = fs::read(&rand_encoder).unwrap();
    fs::write(&rand_encoder, b"{\"kind\":\"tampered\"}").unwrap();
    assert_success(&run_lab(&ws, "all", "1", false));
    assert_eq!(fs::read(&rand_encoder).unwrap(), pristine);
    assert_eq!(fs::read(&curves_path).unwrap(), curves);
    assert_eq!(fs::read(&lnsr_path).unwrap(), lnsr);
}

#[test]
fn stages_out_of_order_name_the_missing_command() {
    let ws = workspace();

    // evaluate straight away: the earliest unmet dependency is data.
    let output = run_lab(&ws, "evaluate", "1", false);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr).to_string();
    assert!(stderr.contains("lab data"), "stderr: {stderr}");

    // After data/pretrain/train, evaluate is blocked on attack.
    for stage in ["data", "pretrain", "train"] {
        assert_success(&run_lab(&ws, stage, "1", false));
    }
    let output = run_lab(&ws, "evaluate", "1", false);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr).to_string();
    assert!(stderr.contains("lab attack"), "stderr: {stderr}");

    // Completing the chain unblocks evaluate.
    assert_success(&run_lab(&ws, "attack", "1", false));
    assert_success(&run_lab(&ws, "evaluate", "1", false));
}

#[test]
fn config_errors_exit_with_code_one() {
    let ws = workspace();

    // Unknown field.
    fs::write(&ws.config, "{\"sed\": 1}").unwrap();
    let output = run_lab(&ws, "data", "1", false);
    assert_eq!(output.status.code(), Some(1));

    // Inconsistent dimensions.
    fs::write(&ws.config, "{\"encoder\": {\"input_dim\": 40}}").unwrap();
    let output = run_lab(&ws, "data", "1", false);
    assert_eq!(output.status.code(), Some(1));

    // Bad LAB_THREADS.
    fs::write(&ws.config, tiny_config_json()).unwrap();
    let output = run_lab(&ws, "data", "zero", false);
    assert_eq!(output.status.code(), Some(1));

    // Usage error (missing --config).
    let output = Command::new(lab_exe()).arg("data").output().unwrap();
    assert_eq!(output.status.code(), Some(1));

    // Help is not an error.
    let output = Command::new(lab_exe()).arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
}

#[test]
fn changed_config_requires_force_and_the_seed_flag_changes_outputs() {
    let ws = workspace();
    assert_success(&run_lab(&ws, "data", "1", false));
    let train_before = fs::read(ws.out.join("data/train.jsonl")).unwrap();

    // Same config, new --seed: stale manifest detected.
    let output = Command::new(lab_exe())
        .args(["data", "--config"])
        .arg(&ws.config)
        .arg("--out")
        .arg(&ws.out)
        .args(["--seed", "12"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr).to_string();
    assert!(stderr.contains("--force"), "stderr: {stderr}");

    // With --force the run starts over and the corpus changes.
    let output = Command::new(lab_exe())
        .args(["data", "--config"])
        .arg(&ws.config)
        .arg("--out")
        .arg(&ws.out)
        .args(["--seed", "12", "--force"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let train_after = fs::read(ws.out.join("data/train.jsonl")).unwrap();
    assert_ne!(train_before, train_after);
}
