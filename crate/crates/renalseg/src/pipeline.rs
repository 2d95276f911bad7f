//! Cross-validated experiment runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use renalseg_core::augment::variant_lattice;
use renalseg_core::metrics::{aggregate, evaluate, CaseMetrics};
use renalseg_core::synthkid::PhantomCase;
use renalseg_core::volgrid::write_lab3;
use renalseg_core::{LabelVolume, Volume3};
use renalseg_dicenet::{binarize, build_unet, checkpoint, predict, train};

use crate::config::{phantom_hash, ExperimentConfig, Strategy};
use crate::data::{
    case_hash, crop_pair, detect, empty_prediction, load_dataset, map_back, reference_for, training_pairs,
    working_grid, BoxRecord, Dataset, DetectKind, Detection,
};
use crate::error::{io_err, PipelineError, Result};
use crate::report::{Artifact, ArtifactKind, CaseError, FoldRecord, Report, RunManifest, Split, Timing};
use crate::TOOL_VERSION;

pub struct RunOutput {
    pub report: Report,
    pub manifest: RunManifest,
}

impl RunOutput {
    /// Exit status contract: every fold of every strategy finished.
    pub fn all_folds_completed(&self) -> bool {
        self.report.all_folds_completed()
    }
}

/// Run a single strategy with everything else taken from `cfg`.
pub fn run_strategy(cfg: &ExperimentConfig, strategy: Strategy) -> Result<RunOutput> {
    run_experiment(&ExperimentConfig {
        strategies: vec![strategy],
        ..cfg.clone()
    })
}

type Detections = BTreeMap<DetectKind, Vec<std::result::Result<Detection, String>>>;

struct FoldOutput {
    records: Vec<FoldRecord>,
    cases: Vec<CaseMetrics>,
    case_errors: Vec<CaseError>,
    artifacts: Vec<Artifact>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    detections: &'a Detections,
    references: &'a BTreeMap<DetectKind, Volume3>,
    out: Option<&'a Path>,
}

fn strategies(cfg: &ExperimentConfig) -> Vec<Strategy> {
    cfg.strategies
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn write_file(out: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&path, bytes).map_err(io_err(&path))
}

/// Generate or load cases, run every strategy over the subject folds and
/// write reports when an output directory is configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: &str, timings: &mut Vec<Timing>| {
        timings.push(Timing {
            stage: stage.to_string(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };

    let data = load_dataset(cfg)?;
    let ids: Vec<String> = data.cases.iter().map(PhantomCase::id).collect();
    let hashes: Vec<String> = data.cases.par_iter().map(case_hash).collect();
    lap("data", &mut timings);

    let strategies = strategies(cfg);
    let kinds: BTreeSet<DetectKind> = strategies.iter().map(|&s| DetectKind::of(s)).collect();
    let mut detections = Detections::new();
    for &kind in &kinds {
        let found = data
            .cases
            .par_iter()
            .map(|c| detect(c, kind, cfg).map_err(|e| e.to_string()))
            .collect();
        detections.insert(kind, found);
    }
    lap("detection", &mut timings);

    let mut references = BTreeMap::new();
    if cfg.augment {
        for &kind in &kinds {
            references.insert(kind, reference_for(&data.spec, kind)?);
        }
    }

    let out = cfg.output_dir.as_deref();
    let mut artifacts = Vec::new();
    if let Some(out) = out {
        for &s in &strategies {
            let kind = DetectKind::of(s);
            for (id, det) in ids.iter().zip(&detections[&kind]) {
                if let Ok(d) = det {
                    let path = format!("boxes/{s}/{id}.json");
                    let record = BoxRecord::new(d, kind, cfg.projection);
                    write_file(out, &path, serde_json::to_string(&record)?.as_bytes())?;
                    artifacts.push(Artifact {
                        kind: ArtifactKind::Box,
                        path,
                        strategy: Some(s.name().into()),
                        fold: None,
                        case_id: Some(id.clone()),
                    });
                }
            }
        }
    }

    let ctx = Ctx {
        cfg,
        data: &data,
        detections: &detections,
        references: &references,
        out,
    };
    let folds = cfg.fold_subjects();
    let fold_outputs: Vec<FoldOutput> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| run_fold(&ctx, &strategies, f, held))
        .collect();
    lap("folds", &mut timings);

    let mut splits = Vec::new();
    for (f, held) in folds.iter().enumerate() {
        let (test, train): (Vec<_>, Vec<_>) = data.cases.iter().partition(|c| held.contains(&c.subject));
        splits.push(Split {
            fold: f,
            train_ids: train.iter().map(|c| c.id()).collect(),
            test_ids: test.iter().map(|c| c.id()).collect(),
        });
    }
    let tested: BTreeSet<&String> = splits.iter().flat_map(|s| &s.test_ids).collect();
    let test_hashes = |hs: &[String]| -> BTreeMap<String, String> {
        ids.iter()
            .zip(hs)
            .filter(|(id, _)| tested.contains(id))
            .map(|(id, h)| (id.clone(), h.clone()))
            .collect()
    };
    let test_hashes_before = test_hashes(&hashes);
    let after: Vec<String> = data.cases.par_iter().map(case_hash).collect();
    let test_hashes_after = test_hashes(&after);

    let mut records = Vec::new();
    let mut cases = Vec::new();
    let mut case_errors = Vec::new();
    for fo in fold_outputs {
        records.extend(fo.records);
        cases.extend(fo.cases);
        case_errors.extend(fo.case_errors);
        artifacts.extend(fo.artifacts);
    }
    records.sort_by(|a, b| (a.fold, &a.strategy).cmp(&(b.fold, &b.strategy)));
    cases.sort_by(|a, b| (&a.strategy, &a.case_id).cmp(&(&b.strategy, &b.case_id)));
    case_errors.sort_by(|a, b| (&a.strategy, &a.case_id).cmp(&(&b.strategy, &b.case_id)));

    let report = Report {
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        phantom_hash: phantom_hash(&data.spec),
        seed: cfg.seed,
        summaries: aggregate(&cases),
        folds: records,
        cases,
        case_errors,
    };
    lap("aggregation", &mut timings);

    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: report.config_hash.clone(),
        splits,
        augmentation_lattice: if cfg.augment {
            variant_lattice()
                .iter()
                .map(|v| format!("{:?}/{:?}", v.contrast, v.geometry))
                .collect()
        } else {
            Vec::new()
        },
        test_hashes_before,
        test_hashes_after,
        artifacts,
        timings,
    };
    if let Some(out) = out {
        write_file(out, "report.json", report.to_json().as_bytes())?;
        write_file(out, "report.txt", report.table().as_bytes())?;
        for name in ["report.json", "report.txt"] {
            manifest.artifacts.push(Artifact {
                kind: ArtifactKind::Report,
                path: name.into(),
                strategy: None,
                fold: None,
                case_id: None,
            });
        }
        write_file(
            out,
            "manifest.json",
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
    }
    Ok(RunOutput { report, manifest })
}

fn run_fold(ctx: &Ctx, strategies: &[Strategy], fold: usize, held: &[u32]) -> FoldOutput {
    let mut fo = FoldOutput {
        records: Vec::new(),
        cases: Vec::new(),
        case_errors: Vec::new(),
        artifacts: Vec::new(),
    };
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..ctx.data.cases.len()).partition(|&i| held.contains(&ctx.data.cases[i].subject));
    for &s in strategies {
        let mut record = FoldRecord {
            fold,
            strategy: s.name().into(),
            held_out_subjects: held.to_vec(),
            train_cases: 0,
            train_pairs: 0,
            test_cases: test.len(),
            final_loss: None,
            error: None,
        };
        let before = (fo.cases.len(), fo.case_errors.len(), fo.artifacts.len());
        if let Err(e) = run_fold_strategy(ctx, s, fold, &train, &test, &mut record, &mut fo) {
            record.error = Some(e.to_string());
            fo.cases.truncate(before.0);
            fo.case_errors.truncate(before.1);
            fo.artifacts.truncate(before.2);
        }
        fo.records.push(record);
    }
    fo
}

fn run_fold_strategy(
    ctx: &Ctx,
    s: Strategy,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
    record: &mut FoldRecord,
    fo: &mut FoldOutput,
) -> Result<()> {
    let cfg = ctx.cfg;
    let kind = DetectKind::of(s);
    let dets = &ctx.detections[&kind];
    let cases = &ctx.data.cases;
    let fold_dir = format!("fold{fold}");

    let net = if s.trains_network() {
        let dims = cfg.crop_dims_for(s);
        let reference = ctx.references.get(&kind).map(|r| (r, cfg.histogram_bins));
        let mut pairs: Vec<(Volume3, LabelVolume)> = Vec::new();
        for &i in train_idx {
            if let Ok(d) = &dets[i] {
                pairs.extend(training_pairs(&cases[i], kind, &d.bbox, dims, reference)?);
                record.train_cases += 1;
            }
        }
        record.train_pairs = pairs.len();
        if pairs.is_empty() {
            return Err(PipelineError::Config("no training case survived detection".into()));
        }
        let mut net = build_unet(&cfg.unet_spec(s, fold))?;
        let trace = train(&mut net, &pairs, &cfg.train_config(fold))?;
        record.final_loss = trace.epoch_loss.last().copied().filter(|l| l.is_finite());
        if let Some(out) = ctx.out {
            let path = format!("{fold_dir}/checkpoints/{s}.un3d");
            write_file(out, &path, &checkpoint::to_bytes(&net))?;
            fo.artifacts.push(Artifact {
                kind: ArtifactKind::Checkpoint,
                path,
                strategy: Some(s.name().into()),
                fold: Some(fold),
                case_id: None,
            });
        }
        Some(net)
    } else {
        None
    };

    for &i in test_idx {
        let case = &cases[i];
        let id = case.id();
        let pred = match (&dets[i], &net) {
            (Err(e), _) => Err(e.clone()),
            (Ok(d), None) => d.em_mask.clone().ok_or_else(|| "no EM mask".to_string()),
            (Ok(d), Some(net)) => {
                let (image, truth) = working_grid(case, kind)?;
                let (input, _) = crop_pair(&image, &truth, &d.bbox, cfg.crop_dims_for(s))?;
                let soft = predict(net, &input)?;
                Ok(map_back(&binarize(&soft, cfg.threshold), &d.bbox, case, kind)?)
            }
        };
        let pred = pred.unwrap_or_else(|error| {
            fo.case_errors.push(CaseError {
                fold,
                strategy: s.name().into(),
                case_id: id.clone(),
                error,
            });
            empty_prediction(case)
        });
        let mut m = evaluate(&pred, &case.truth)?;
        m.case_id = id.clone();
        m.strategy = s.name().into();
        fo.cases.push(m);
        if let Some(out) = ctx.out {
            let path = format!("{fold_dir}/predictions/{s}/{id}.lab3");
            let full = out.join(&path);
            if let Some(parent) = full.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            write_lab3(&pred, &full)?;
            fo.artifacts.push(Artifact {
                kind: ArtifactKind::Prediction,
                path,
                strategy: Some(s.name().into()),
                fold: Some(fold),
                case_id: Some(id),
            });
        }
    }
    Ok(())
}
