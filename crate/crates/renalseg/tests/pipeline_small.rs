use std::collections::BTreeSet;
use std::fs;

use renalseg::{compare_strategies, run_experiment, run_strategy, ExperimentConfig, PipelineError, Report, Strategy};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        n_subjects: 4,
        timepoints_per_subject: 2,
        dims: [48, 48, 8],
        kidney_volume_range: (100, 2000),
        crop_dims: [16, 16, 8],
        sr_crop_dims: [16, 16, 16],
        levels: 2,
        base_channels: 2,
        epochs: 1,
        batch_size: 4,
        folds: 2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn small_experiment_is_reproducible_and_leak_free() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &std::path::Path| {
        run_experiment(&ExperimentConfig {
            output_dir: Some(dir.to_path_buf()),
            ..small()
        })
        .unwrap()
    };
    let out = run(a.path());
    let again = run(b.path());

    assert!(out.all_folds_completed(), "{:?}", out.report.folds);
    assert_eq!(
        fs::read(a.path().join("report.json")).unwrap(),
        fs::read(b.path().join("report.json")).unwrap()
    );
    assert_eq!(out.report, again.report);

    let m = &out.manifest;
    assert!(m.leaked_ids().is_empty());
    assert!(m.test_split_unchanged());
    assert!(m.missing_artifacts(a.path()).is_empty());
    assert_eq!(m.augmentation_lattice.len(), 10);
    let mut tested = BTreeSet::new();
    for split in &m.splits {
        for id in &split.test_ids {
            assert!(tested.insert(id.clone()), "{id} tested twice");
        }
    }
    assert_eq!(tested.len(), 8);

    for s in Strategy::ALL {
        assert_eq!(
            out.report.cases.iter().filter(|c| c.strategy == s.name()).count(),
            8,
            "{s}"
        );
    }
    for f in &out.report.folds {
        if f.strategy != "em_only" {
            assert_eq!(f.train_pairs, 10 * f.train_cases, "{f:?}");
        }
    }
    let loaded = Report::load(&a.path().join("report.json")).unwrap();
    assert_eq!(loaded, out.report);
}

#[test]
fn separate_strategy_reports_compare() {
    let cfg = ExperimentConfig {
        augment: false,
        ..small()
    };
    let em = run_strategy(&cfg, Strategy::EmOnly).unwrap().report;
    let raw = run_strategy(&cfg, Strategy::UnetRaw).unwrap().report;
    let cmp = compare_strategies(&[raw.clone(), em.clone()]).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    let shuffled = compare_strategies(&[em.clone(), raw.clone()]).unwrap();
    assert_eq!(cmp, shuffled);
    assert!(cmp.rows[0].dsc.mean >= cmp.rows[1].dsc.mean);

    let other = run_strategy(&ExperimentConfig { seed: 6, ..cfg }, Strategy::EmOnly)
        .unwrap()
        .report;
    assert!(matches!(
        compare_strategies(&[raw, other]),
        Err(PipelineError::Comparability(_))
    ));
    assert!(matches!(
        compare_strategies(&[em]),
        Err(PipelineError::Comparability(_))
    ));
}

#[test]
fn unknown_keys_and_bad_folds_are_rejected() {
    assert!(ExperimentConfig::from_json(r#"{"sead": 1}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"folds": 1}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"strategies": ["proposed", "em"]}"#).is_err());
    let cfg = ExperimentConfig::from_json(r#"{"seed": 3, "strategies": ["em_only"]}"#).unwrap();
    assert_eq!(cfg.strategies, vec![Strategy::EmOnly]);
}
