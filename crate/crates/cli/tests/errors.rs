use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn roomdiff(out: &Path, args: &[&str]) -> (bool, Value) {
    let o = Command::new(env!("CARGO_BIN_EXE_roomdiff"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    let stream = if o.status.success() { &o.stdout } else { &o.stderr };
    let text = String::from_utf8_lossy(stream);
    let record = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"));
    (o.status.success(), record)
}

fn expect_error(out: &Path, args: &[&str], code: &str, phase: &str) {
    let (ok, rec) = roomdiff(out, args);
    assert!(!ok, "{args:?} succeeded");
    assert_eq!(rec["code"], code, "{rec}");
    assert_eq!(rec["phase"], phase, "{rec}");
    assert!(rec["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[test]
fn config_command_prints_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, rec) = roomdiff(dir.path(), &["--smoke", "--seed", "7", "config"]);
    assert!(ok);
    assert_eq!(rec["seed"], 7);
    assert_eq!(rec["corpus"]["high_res"], 32);
}

#[test]
fn missing_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    expect_error(dir.path(), &["--smoke", "eval"], "DependencyError", "eval");
    expect_error(dir.path(), &["--smoke", "train-diffusion"], "DependencyError", "train-diffusion");
    expect_error(dir.path(), &["--smoke", "rlcf"], "DependencyError", "rlcf");
    expect_error(dir.path(), &["--smoke", "plot"], "DependencyError", "plot");
}

#[test]
fn bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let mut cfg: Value = serde_json::from_str(&roomdiff_cli::ExperimentConfig::smoke().to_json()).unwrap();
    cfg["version"] = 99.into();
    std::fs::write(&path, cfg.to_string()).unwrap();
    expect_error(dir.path(), &["--config", path.to_str().unwrap(), "corpus"], "ConfigError", "config");

    std::fs::write(&path, "{ not json").unwrap();
    expect_error(dir.path(), &["--config", path.to_str().unwrap(), "corpus"], "ConfigError", "config");

    cfg["version"] = 1.into();
    cfg["rlcf"]["topk"] = 5.into();
    cfg["rlcf"]["selection_mode"] = "topk_plus_original".into();
    std::fs::write(&path, cfg.to_string()).unwrap();
    expect_error(dir.path(), &["--config", path.to_str().unwrap(), "corpus"], "InvalidTopK", "config");
}

#[test]
fn ablation_arguments() {
    let dir = tempfile::tempdir().unwrap();
    expect_error(dir.path(), &["--smoke", "ablate", "--variants", "no_magic"], "UnknownVariant", "ablate");
    expect_error(dir.path(), &["--smoke", "ablate", "--variants", ""], "NothingToAblate", "ablate");
}

#[test]
fn run_directory_belongs_to_one_config() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, _) = roomdiff(dir.path(), &["--smoke", "corpus"]);
    assert!(ok);
    expect_error(dir.path(), &["--smoke", "--seed", "3", "corpus"], "ResumeMismatch", "ledger");
    std::fs::write(dir.path().join(".lock"), "").unwrap();
    let (ok, rec) = roomdiff(dir.path(), &["--smoke", "corpus"]);
    assert!(!ok);
    assert_eq!(rec["code"], "LockHeld");
}
