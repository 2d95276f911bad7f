//! Experiment configuration. Every key is top-level in the JSON file; keys
//! left out take the [`ExperimentConfig::default`] value.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use renalseg_core::emseg::EmConfig;
use renalseg_core::localizer::{ClassSelection, LocalizeConfig, Projection};
use renalseg_core::synthkid::{mix_seed, PhantomSpec};
use renalseg_core::Dims;
use renalseg_dicenet::{DiceLossKind, InputNorm, Optimizer, TrainConfig, UNet3dSpec};

use crate::error::{PipelineError, Result};

/// The five segmentation strategies that can be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// U-Net on the whole volume, resampled to the crop grid.
    UnetRaw,
    /// U-Net inside the box of the largest bright connected component.
    CcUnet,
    /// The EM kidney class, restricted to its largest component.
    EmOnly,
    /// U-Net inside the EM detection box.
    Proposed,
    /// As `Proposed`, on volumes upscaled 5x along z.
    ProposedSr,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::UnetRaw,
        Strategy::CcUnet,
        Strategy::EmOnly,
        Strategy::Proposed,
        Strategy::ProposedSr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::UnetRaw => "unet_raw",
            Strategy::CcUnet => "cc_unet",
            Strategy::EmOnly => "em_only",
            Strategy::Proposed => "proposed",
            Strategy::ProposedSr => "proposed_sr",
        }
    }

    pub fn trains_network(self) -> bool {
        self != Strategy::EmOnly
    }

    pub fn uses_em(self) -> bool {
        matches!(self, Strategy::EmOnly | Strategy::Proposed | Strategy::ProposedSr)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: phantoms, network initialisation and shuffling derive from it.
    pub seed: u64,
    pub strategies: Vec<Strategy>,
    /// Read cases written by `renalseg synth` instead of generating them.
    pub data_dir: Option<PathBuf>,
    /// Where artifacts and reports go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,

    pub n_subjects: u32,
    pub timepoints_per_subject: u32,
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub kidney_volume_range: (usize, usize),
    pub noise_sigma: f32,
    pub texture: f32,
    pub distractor_count: (u32, u32),

    pub em_classes: usize,
    pub em_iterations: usize,
    pub mrf_beta: f64,
    pub kmeans_iterations: usize,
    pub variance_floor_ratio: f64,

    pub margin_px: usize,
    pub class_selection: ClassSelection,
    pub projection: Projection,
    pub min_blob_area: usize,
    pub crop_dims: Dims,
    /// Crop grid for the upscaled strategy.
    pub sr_crop_dims: Dims,

    pub levels: usize,
    pub base_channels: usize,
    pub input_norm: InputNorm,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub loss: DiceLossKind,
    pub threshold: f32,

    /// Train on the 10x histogram-matched and rotated/flipped lattice.
    pub augment: bool,
    pub histogram_bins: usize,
    /// Round-robin folds over subjects; ignored with `leave_one_subject_out`.
    pub folds: u32,
    pub leave_one_subject_out: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let phantom = PhantomSpec::default();
        let em = EmConfig::default();
        let loc = LocalizeConfig::default();
        let net = UNet3dSpec::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            strategies: Strategy::ALL.to_vec(),
            data_dir: None,
            output_dir: None,
            n_subjects: phantom.n_subjects,
            timepoints_per_subject: phantom.timepoints_per_subject,
            dims: phantom.dims,
            spacing: phantom.spacing,
            kidney_volume_range: phantom.kidney_volume_range,
            noise_sigma: phantom.noise_sigma,
            texture: phantom.texture,
            distractor_count: phantom.distractor_count,
            em_classes: em.classes,
            em_iterations: em.em_iterations,
            mrf_beta: em.mrf_beta,
            kmeans_iterations: em.kmeans_iterations,
            variance_floor_ratio: em.variance_floor_ratio,
            margin_px: loc.margin_px,
            class_selection: loc.class_selection,
            projection: loc.projection,
            min_blob_area: loc.min_blob_area,
            crop_dims: loc.crop_dims,
            sr_crop_dims: [64, 64, 64],
            levels: net.levels,
            base_channels: net.base_channels,
            input_norm: net.input_norm,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            loss: train.loss,
            threshold: 0.5,
            augment: true,
            histogram_bins: 256,
            folds: 5,
            leave_one_subject_out: false,
        }
    }
}

/// Seed streams derived from the master seed.
const STREAM_INIT: u64 = 0x1000;
const STREAM_SHUFFLE: u64 = 0x2000;
const STREAM_KMEANS: u64 = 0x3000;

impl ExperimentConfig {
    /// A configuration sized for a single desktop CPU: no augmentation and a
    /// short training schedule.
    pub fn desk() -> Self {
        Self {
            augment: false,
            epochs: 2,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(PipelineError::Config("no strategies selected".into()));
        }
        if !self.leave_one_subject_out && (self.folds < 2 || self.folds > self.n_subjects) {
            return Err(PipelineError::Config(format!(
                "{} folds for {} subjects",
                self.folds, self.n_subjects
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.histogram_bins < 2 {
            return Err(PipelineError::Config("need at least two histogram bins".into()));
        }
        self.phantom_spec().validate()?;
        self.em_config().validate()?;
        self.train_config(0).validate()?;
        for s in &self.strategies {
            if s.trains_network() {
                self.unet_spec(*s, 0).validate()?;
            }
        }
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            dims: self.dims,
            spacing: self.spacing,
            n_subjects: self.n_subjects,
            timepoints_per_subject: self.timepoints_per_subject,
            kidney_volume_range: self.kidney_volume_range,
            noise_sigma: self.noise_sigma,
            texture: self.texture,
            distractor_count: self.distractor_count,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            classes: self.em_classes,
            em_iterations: self.em_iterations,
            mrf_beta: self.mrf_beta,
            kmeans_iterations: self.kmeans_iterations,
            kmeans_seed: mix_seed(self.seed, STREAM_KMEANS),
            variance_floor_ratio: self.variance_floor_ratio,
        }
    }

    pub fn localize_config(&self, strategy: Strategy) -> LocalizeConfig {
        LocalizeConfig {
            margin_px: self.margin_px,
            class_selection: self.class_selection,
            projection: self.projection,
            min_blob_area: self.min_blob_area,
            crop_dims: self.crop_dims_for(strategy),
        }
    }

    pub fn crop_dims_for(&self, strategy: Strategy) -> Dims {
        if strategy == Strategy::ProposedSr {
            self.sr_crop_dims
        } else {
            self.crop_dims
        }
    }

    pub fn unet_spec(&self, strategy: Strategy, fold: usize) -> UNet3dSpec {
        UNet3dSpec {
            levels: self.levels,
            base_channels: self.base_channels,
            in_channels: 1,
            input_dims: self.crop_dims_for(strategy),
            seed: mix_seed(self.seed, STREAM_INIT + fold as u64),
            input_norm: self.input_norm,
        }
    }

    pub fn train_config(&self, fold: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed: mix_seed(self.seed, STREAM_SHUFFLE + fold as u64),
            loss: self.loss,
            ..TrainConfig::default()
        }
    }

    /// Subject ids held out by each fold.
    pub fn fold_subjects(&self) -> Vec<Vec<u32>> {
        if self.leave_one_subject_out {
            (0..self.n_subjects).map(|s| vec![s]).collect()
        } else {
            (0..self.folds)
                .map(|f| (0..self.n_subjects).filter(|s| s % self.folds == f).collect())
                .collect()
        }
    }

    /// SHA-256 of the configuration, ignoring where outputs are written.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output_dir: None,
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a phantom spec, for checking that reports are comparable.
pub fn phantom_hash(spec: &PhantomSpec) -> String {
    sha256_hex(&serde_json::to_vec(spec).expect("spec serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("unet".parse::<Strategy>().is_err());
    }

    #[test]
    fn flat_json_with_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 3, "epochs": 1, "strategies": ["em_only"]}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.margin_px, 5);
        assert!(ExperimentConfig::from_json(r#"{"sead": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"strategies": ["magic"]}"#).is_err());
    }

    #[test]
    fn folds_partition_subjects() {
        let cfg = ExperimentConfig::default();
        let folds = cfg.fold_subjects();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<u32> = folds.concat();
        all.sort();
        assert_eq!(all, (0..15).collect::<Vec<_>>());
        let loso = ExperimentConfig {
            leave_one_subject_out: true,
            ..cfg
        };
        assert_eq!(loso.fold_subjects().len(), 15);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("/tmp/x".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig { seed: 1, ..a }.hash());
    }
}
