//! End-to-end checks of the binary: artifacts on disk, determinism,
//! snapshot reloadability, and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctattn"))
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ctattn-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_default()
}

#[test]
fn gen_spiral_is_byte_deterministic() {
    let dir = tmpdir("gen");
    for sub in ["a", "b"] {
        let out = bin()
            .args(["gen-spiral", "--seed", "7", "--count", "10"])
            .args(["--out", dir.join(sub).to_str().unwrap()])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = read(&dir.join("a/spirals.jsonl"));
    let b = read(&dir.join("b/spirals.jsonl"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(
        read(&dir.join("a/metrics.json")),
        read(&dir.join("b/metrics.json"))
    );
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tmpdir("badkey");
    let cfg = dir.join("run.conf");
    std::fs::write(&cfg, "seed = 3\nwibble = 7\n").unwrap();
    let out = bin()
        .args(["gen-spiral", "--config", cfg.to_str().unwrap()])
        .args(["--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("wibble"), "{err}");
}

#[test]
fn invalid_flag_value_exits_2() {
    let dir = tmpdir("badflag");
    let out = bin()
        .args(["verify-theorem", "--quadrature", "gauss:9"])
        .args(["--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("quadrature"), "{err}");
}

#[test]
fn verify_theorem_reports_error_bound() {
    let dir = tmpdir("verify");
    let out = bin()
        .args(["verify-theorem", "--trials", "4", "--quadrature", "gauss:5"])
        .args(["--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&read(&dir.join("metrics.json"))).unwrap();
    assert_eq!(metrics["schema_version"], 1);
    let err = metrics["metrics"]["max_abs_error"].as_f64().unwrap();
    assert!(err < 1e-3, "max error {err}");
    assert_eq!(metrics["metrics"]["within_1e3"], true);
    assert!(dir.join("metrics.csv").exists());
    assert!(dir.join("config.snapshot").exists());
}

#[test]
fn config_snapshot_reproduces_a_run() {
    let dir = tmpdir("snapshot");
    let first = dir.join("first");
    let out = bin()
        .args(["gen-mtpp", "--seed", "11", "--count", "3"])
        .args(["--out", first.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let second = dir.join("second");
    let out = bin()
        .args([
            "gen-mtpp",
            "--config",
            first.join("config.snapshot").to_str().unwrap(),
        ])
        .args(["--out", second.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        read(&first.join("events.jsonl")),
        read(&second.join("events.jsonl"))
    );
}

#[test]
fn tiny_spiral_training_round_trips_through_eval() {
    let dir = tmpdir("train");
    let out = bin()
        .args([
            "train-spiral",
            "--seed",
            "5",
            "--iters",
            "2",
            "--batch",
            "2",
        ])
        .args(["--train-count", "4", "--test-count", "2", "--d-model", "8"])
        .args([
            "--queries-per-iter",
            "4",
            "--step-size",
            "0.5",
            "--workers",
            "1",
        ])
        .args(["--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&read(&dir.join("metrics.json"))).unwrap();
    assert!(metrics["metrics"]["interp_rmse"]
        .as_f64()
        .unwrap()
        .is_finite());
    let ck = dir.join("checkpoint.json");
    assert!(ck.exists());

    let eval_dir = dir.join("eval");
    let out = bin()
        .args(["eval-spiral", "--checkpoint", ck.to_str().unwrap()])
        .args(["--seed", "5", "--test-count", "2", "--workers", "1"])
        .args(["--out", eval_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval_metrics: serde_json::Value =
        serde_json::from_str(&read(&eval_dir.join("metrics.json"))).unwrap();
    // Same test split, same params: evaluation reproduces training's numbers.
    assert_eq!(
        metrics["metrics"]["interp_rmse"],
        eval_metrics["metrics"]["interp_rmse"]
    );
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let dir = tmpdir("nockpt");
    let out = bin()
        .args(["eval-mtpp", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn env_seed_is_the_fallback() {
    let dir = tmpdir("envseed");
    for sub in ["a", "b"] {
        let out = bin()
            .env("CTATTN_SEED", "21")
            .args(["gen-spiral", "--count", "3"])
            .args(["--out", dir.join(sub).to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let explicit = dir.join("c");
    let out = bin()
        .args(["gen-spiral", "--count", "3", "--seed", "21"])
        .args(["--out", explicit.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        read(&dir.join("a/spirals.jsonl")),
        read(&dir.join("b/spirals.jsonl"))
    );
    assert_eq!(
        read(&dir.join("a/spirals.jsonl")),
        read(&explicit.join("spirals.jsonl"))
    );
}
