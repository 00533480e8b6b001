use std::fs;
use std::path::Path;

use roomdiff_cli::config::ExperimentConfig;
use roomdiff_cli::ledger::RunLedger;
use roomdiff_cli::pipeline::{self, DiffusionMode, Run, Variant};

fn full_run(dir: &Path) -> RunLedger {
    let mut run = Run::open(ExperimentConfig::smoke(), dir, false).unwrap();
    pipeline::train_all(&mut run, DiffusionMode::Curriculum, true).unwrap();
    pipeline::cmd_eval(&mut run).unwrap();
    run.ledger.clone()
}

#[test]
fn eval_before_training_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(ExperimentConfig::smoke(), dir.path(), false).unwrap();
    pipeline::cmd_corpus(&mut run).unwrap();
    let err = pipeline::cmd_eval(&mut run).unwrap_err();
    assert_eq!(err.code, "DependencyError");
    assert!(err.message.contains("train-"), "{}", err.message);
}

#[test]
fn plot_without_history_is_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(ExperimentConfig::smoke(), dir.path(), false).unwrap();
    assert_eq!(pipeline::cmd_plot(&mut run).unwrap_err().code, "DependencyError");
}

#[test]
fn pipeline_is_deterministic_and_plots() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let la = full_run(a.path());
    let lb = full_run(b.path());
    assert_eq!(la.artifact_hashes(), lb.artifact_hashes());
    for report in ["metrics.csv", "metrics.json", "curriculum_history.csv", "rlcf_stages.csv", "rlcf_stages.jsonl"] {
        let ra = fs::read(a.path().join("reports").join(report)).unwrap();
        let rb = fs::read(b.path().join("reports").join(report)).unwrap();
        assert_eq!(ra, rb, "{report}");
    }
    let metrics = fs::read_to_string(a.path().join("reports/metrics.csv")).unwrap();
    let tags: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(tags, ["test_set", "curriculum", "rlcf"]);

    let mut run = Run::open(ExperimentConfig::smoke(), a.path(), false).unwrap();
    let files = pipeline::cmd_plot(&mut run).unwrap();
    assert_eq!(files.len(), 6);
    for f in files {
        assert!(fs::metadata(a.path().join(&f)).unwrap().len() > 0, "{f}");
    }
}

#[test]
fn ablation_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let rows = pipeline::cmd_ablate(&ExperimentConfig::smoke(), dir.path(), &[Variant::NoRlcf, Variant::NoCap, Variant::NoCl]).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_cap", "no_cl", "no_rlcf"]);
    let csv = fs::read_to_string(dir.path().join("ablate/ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), pipeline::ABLATION_HEADER);
    assert_eq!(csv.lines().count(), 5);

    let ledger: RunLedger = serde_json::from_slice(&fs::read(dir.path().join("ablate/no_rlcf/ledger.json")).unwrap()).unwrap();
    assert!(ledger.phase("rlcf").is_none());
    assert!(ledger.phase("rlcf-compensation").is_some());
    let full = rows.iter().find(|r| r.variant == "full").unwrap();
    let no_rlcf = rows.iter().find(|r| r.variant == "no_rlcf").unwrap();
    assert_eq!(full.gradient_steps, no_rlcf.gradient_steps);
}
