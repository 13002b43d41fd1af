mod common;

use std::fs;
use std::process::Command;

use common::tiny_experiment;
use delta_core::analysis::Comparison;
use delta_core::experiment::{compare_run_dirs, run_experiment, Manifest};
use delta_core::regularizers::RegularizerKind;
use delta_core::trainer::MetricsLog;

#[test]
fn full_run_writes_a_consistent_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path());
    let out = run_experiment(&cfg).unwrap();
    let root = dir.path();
    assert!(Manifest::is_complete(root));

    for kind in RegularizerKind::ALL {
        for seed in 0..5 {
            let base = root.join("runs").join(kind.as_str()).join(format!("seed{seed}"));
            let log = MetricsLog::from_csv(&fs::read_to_string(base.with_extension("csv")).unwrap()).unwrap();
            assert!(log.rows.iter().all(|r| r.train_loss.is_finite()), "{kind} seed {seed}");
            assert!(base.with_extension("dlta").exists());
        }
        let row = out.comparison.row(kind).unwrap();
        assert_eq!(row.seeds, 5);
        assert!(row.mean_acc.is_finite() && row.std_acc.is_finite());
    }

    // The summary is recomputable from the per-seed CSVs alone.
    let rebuilt = compare_run_dirs(&[root.to_path_buf()]).unwrap();
    assert_eq!(rebuilt, out.comparison);
    assert_eq!(
        rebuilt.summary_json().unwrap(),
        fs::read_to_string(root.join("summary.json")).unwrap()
    );
    let csv = fs::read_to_string(root.join("comparison.csv")).unwrap();
    let parsed = Comparison::from_csv(&csv).unwrap();
    assert_eq!(parsed.rows, out.comparison.rows);

    let fraction = out.distances.as_ref().unwrap().mean;
    assert!((0.0..=1.0).contains(&fraction));
    assert!(root.join("distances_DELTA.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = tiny_experiment(a.path());
    cfg.seeds = vec![0, 1];
    run_experiment(&cfg).unwrap();
    cfg.out_dir = b.path().to_path_buf();
    run_experiment(&cfg).unwrap();
    let mut files = vec![
        "summary.json".to_string(),
        "comparison.csv".into(),
        "distances.json".into(),
    ];
    for kind in RegularizerKind::ALL {
        for seed in 0..2 {
            files.push(format!("runs/{}/seed{seed}.csv", kind.as_str()));
        }
    }
    for f in files {
        let (x, y) = (
            fs::read(a.path().join(&f)).unwrap(),
            fs::read(b.path().join(&f)).unwrap(),
        );
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn failed_run_leaves_manifest_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("broken.dlta");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let mut cfg = tiny_experiment(dir.path().join("out"));
    cfg.model.source_checkpoint = Some(junk);
    assert!(run_experiment(&cfg).is_err());
    let manifest = fs::read_to_string(dir.path().join("out/MANIFEST")).unwrap();
    assert!(manifest.starts_with("status incomplete\n"), "{manifest}");
    assert!(!Manifest::is_complete(&dir.path().join("out")));
}

#[test]
fn cli_reports_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_delta"))
        .arg("--config")
        .arg(&missing)
        .arg("run")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = Command::new(env!("CARGO_BIN_EXE_delta"))
        .arg("no-such-verb")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn shipped_config_matches_defaults() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = delta_core::experiment::ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg, delta_core::experiment::ExperimentConfig::new("runs/default"));
}
