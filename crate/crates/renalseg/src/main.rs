use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use renalseg::config::{ExperimentConfig, Strategy};
use renalseg::data::{self, BoxRecord, Dataset, DetectKind};
use renalseg::error::{PipelineError, Result};
use renalseg::{compare_strategies, run_experiment, Report};
use renalseg_core::augment::expand_training_set;
use renalseg_core::emseg::em_segment;
use renalseg_core::metrics::evaluate;
use renalseg_core::synthkid::{reference_volume, PhantomCase};
use renalseg_core::volgrid::{read_lab3, read_vol3, write_lab3, write_vol3};
use renalseg_dicenet::{binarize, build_unet, checkpoint, predict, train};

/// Kidney segmentation experiments on diffusion-like phantoms.
///
/// Every subcommand reads an optional flat JSON config (`--config`); its keys
/// are the fields of the experiment configuration and default when absent.
/// RENALSEG_THREADS caps the worker thread count.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the reduced single-CPU preset instead of the full defaults.
    #[arg(long, global = true)]
    desk: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantom cases and manifest.json to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// EM segmentation of one volume.
    Emseg {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        diag: Option<PathBuf>,
    },
    /// Detect the kidney box on an FA volume and crop the MD volume.
    Localize {
        #[arg(long)]
        fa: PathBuf,
        #[arg(long)]
        md: PathBuf,
        #[arg(long)]
        out_box: PathBuf,
        #[arg(long)]
        out_crop: PathBuf,
    },
    /// Expand synthesized cases into the 10x augmentation lattice.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one strategy's network on a fold's training split, or on
    /// every case without `--fold`.
    Train {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one case with a trained network.
    Predict {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fa: PathBuf,
        #[arg(long)]
        md: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DSC, VD and PPV of a prediction.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Full cross-validated experiment.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge reports and check the strategy ordering.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if cli.desk {
                let mut base = serde_json::to_value(ExperimentConfig::desk())?;
                let over: serde_json::Value = serde_json::from_str(&text)?;
                if let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) {
                    b.extend(o.clone());
                }
                serde_json::from_value(base)?
            } else {
                ExperimentConfig::from_json(&text)?
            }
        }
        None if cli.desk => ExperimentConfig::desk(),
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn single_case(fa: &Path, md: &Path) -> Result<PhantomCase> {
    let fa = read_vol3(fa)?;
    let md = read_vol3(md)?;
    let truth =
        renalseg_core::LabelVolume::from_mask(md.dims(), md.spacing(), std::iter::repeat(false).take(md.len()))?;
    Ok(PhantomCase {
        subject: 0,
        timepoint: 0,
        fa,
        md,
        truth,
    })
}

#[derive(Serialize)]
struct AugmentEntry {
    source: String,
    variant: String,
    image: String,
    labels: String,
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => {
            let data = data::load_dataset(&cfg)?;
            let manifest = data::write_dataset(&data, out)?;
            println!("wrote {} cases to {}", manifest.cases.len(), out.display());
        }
        Command::Emseg {
            input,
            classes,
            iters,
            beta,
            seed,
            out,
            diag,
        } => {
            let mut em = cfg.em_config();
            em.classes = classes.unwrap_or(em.classes);
            em.em_iterations = iters.unwrap_or(em.em_iterations);
            em.mrf_beta = beta.unwrap_or(em.mrf_beta);
            em.kmeans_seed = seed.unwrap_or(em.kmeans_seed);
            let result = em_segment(&read_vol3(input)?, &em)?;
            write_lab3(&result.labels, out)?;
            if let Some(diag) = diag {
                #[derive(Serialize)]
                struct Diag<'a> {
                    log_likelihood: &'a [f64],
                    empty_classes: &'a [(usize, usize)],
                    means: &'a [f64],
                    variances: &'a [f64],
                    weights: &'a [f64],
                }
                let m = &result.mixture;
                write_json(
                    diag,
                    &Diag {
                        log_likelihood: &result.diagnostics.log_likelihood,
                        empty_classes: &result.diagnostics.empty_classes,
                        means: &m.means,
                        variances: &m.variances,
                        weights: &m.weights,
                    },
                )?;
            }
        }
        Command::Localize {
            fa,
            md,
            out_box,
            out_crop,
        } => {
            let loc = renalseg_core::localizer::localize_and_crop(
                &read_vol3(fa)?,
                &read_vol3(md)?,
                &cfg.localize_config(Strategy::Proposed),
                &cfg.em_config(),
            )?;
            let det = data::Detection {
                bbox: loc.bbox,
                class: Some(loc.class),
                em_mask: None,
            };
            write_json(out_box, &BoxRecord::new(&det, DetectKind::Em, cfg.projection))?;
            write_vol3(&loc.crop, out_crop)?;
        }
        Command::Augment { data: dir, out } => {
            let data = data::read_dataset(dir)?;
            let reference = reference_volume(&data.spec)?;
            fs::create_dir_all(out).map_err(|source| PipelineError::Io {
                path: out.display().to_string(),
                source,
            })?;
            let mut entries = Vec::new();
            for case in &data.cases {
                let id = case.id();
                let variants =
                    expand_training_set(&[(case.md.clone(), case.truth.clone())], &reference, cfg.histogram_bins)?;
                for (k, a) in variants.iter().enumerate() {
                    let image = format!("{id}_v{k}_md.vol3");
                    let labels = format!("{id}_v{k}_truth.lab3");
                    write_vol3(&a.image, out.join(&image))?;
                    write_lab3(&a.labels, out.join(&labels))?;
                    entries.push(AugmentEntry {
                        source: id.clone(),
                        variant: format!("{:?}/{:?}", a.variant.contrast, a.variant.geometry),
                        image,
                        labels,
                    });
                }
            }
            println!("{} cases expanded to {}", data.cases.len(), entries.len());
            write_json(&out.join("manifest.json"), &entries)?;
        }
        Command::Train { strategy, fold, out } => {
            if !strategy.trains_network() {
                return Err(PipelineError::Config(format!("{strategy} has no network")));
            }
            let data = data::load_dataset(&cfg)?;
            let held = match fold {
                Some(f) => cfg
                    .fold_subjects()
                    .get(*f)
                    .cloned()
                    .ok_or_else(|| PipelineError::Config(format!("no fold {f}")))?,
                None => Vec::new(),
            };
            let net = train_strategy(&cfg, &data, *strategy, fold.unwrap_or(0), &held)?;
            checkpoint::save(&net, out)?;
        }
        Command::Predict {
            strategy,
            model,
            fa,
            md,
            out,
        } => {
            let net = checkpoint::load(model)?;
            let case = single_case(fa, md)?;
            let kind = DetectKind::of(*strategy);
            let det = data::detect(&case, kind, &cfg)?;
            let (image, truth) = data::working_grid(&case, kind)?;
            let (input, _) = data::crop_pair(&image, &truth, &det.bbox, net.spec().input_dims)?;
            let soft = predict(&net, &input)?;
            let pred = data::map_back(&binarize(&soft, cfg.threshold), &det.bbox, &case, kind)?;
            write_lab3(&pred, out)?;
        }
        Command::Eval { pred, truth } => {
            let m = evaluate(&read_lab3(pred)?, &read_lab3(truth)?)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Run { out } => {
            let cfg = ExperimentConfig {
                output_dir: out.clone().or(cfg.output_dir),
                ..cfg
            };
            let run = run_experiment(&cfg)?;
            print!("{}", run.report.table());
            for f in run.report.folds.iter().filter(|f| f.error.is_some()) {
                eprintln!(
                    "fold {} {} failed: {}",
                    f.fold,
                    f.strategy,
                    f.error.as_deref().unwrap_or("")
                );
            }
            return Ok(run.all_folds_completed());
        }
        Command::Compare { reports } => {
            let reports = reports.iter().map(|p| Report::load(p)).collect::<Result<Vec<_>>>()?;
            let c = compare_strategies(&reports)?;
            print!("{}", c.table());
        }
    }
    Ok(true)
}

fn train_strategy(
    cfg: &ExperimentConfig,
    data: &Dataset,
    strategy: Strategy,
    fold: usize,
    held: &[u32],
) -> Result<renalseg_dicenet::UNet3d> {
    let kind = DetectKind::of(strategy);
    let dims = cfg.crop_dims_for(strategy);
    let reference = if cfg.augment {
        Some(data::reference_for(&data.spec, kind)?)
    } else {
        None
    };
    let mut pairs = Vec::new();
    for case in data.cases.iter().filter(|c| !held.contains(&c.subject)) {
        match data::detect(case, kind, cfg) {
            Ok(d) => pairs.extend(data::training_pairs(
                case,
                kind,
                &d.bbox,
                dims,
                reference.as_ref().map(|r| (r, cfg.histogram_bins)),
            )?),
            Err(e) => eprintln!("skipping {}: {e}", case.id()),
        }
    }
    if pairs.is_empty() {
        return Err(PipelineError::Config("no training pairs".into()));
    }
    let mut net = build_unet(&cfg.unet_spec(strategy, fold))?;
    let trace = train(&mut net, &pairs, &cfg.train_config(fold))?;
    if let Some(loss) = trace.epoch_loss.last() {
        println!("trained on {} pairs, final loss {loss:.4}", pairs.len());
    }
    Ok(net)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("RENALSEG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: {e}");
        }
    }
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
