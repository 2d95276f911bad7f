//! Kidney detection boxes from EM label maps or thresholded volumes.

mod components;

pub use components::{filter_small_blobs_2d, label_components, largest_component, Components, UnionFind};

use serde::{Deserialize, Serialize};

use crate::emseg::{em_segment, EmConfig, EmResult, GaussianMixture};
use crate::error::{Error, Result};
use crate::volgrid::{
    crop, project_max_z, resize_trilinear, slice_mask, DetectionBox, Dims, LabelVolume, Mask2, Volume3,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ClassSelection {
    Fixed {
        index: u8,
    },
    /// Lowest-mean class whose voxel fraction lies in `[min_fraction, max_fraction]`.
    AutoLowFa {
        min_fraction: f64,
        max_fraction: f64,
    },
}

impl Default for ClassSelection {
    fn default() -> Self {
        ClassSelection::AutoLowFa {
            min_fraction: 0.005,
            max_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    /// Union of the class over all slices.
    #[default]
    MaxOverZ,
    /// The class in slice `nz / 2` only.
    CentralSlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub margin_px: usize,
    pub class_selection: ClassSelection,
    pub projection: Projection,
    /// In-plane blobs of the projected mask smaller than this are ignored.
    pub min_blob_area: usize,
    /// Grid the cropped region is resampled to.
    pub crop_dims: Dims,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            margin_px: 5,
            class_selection: ClassSelection::default(),
            projection: Projection::MaxOverZ,
            min_blob_area: 1,
            crop_dims: [64, 64, 16],
        }
    }
}

pub fn select_kidney_class(labels: &LabelVolume, mixture: &GaussianMixture, mode: &ClassSelection) -> Result<u8> {
    match *mode {
        ClassSelection::Fixed { index } => {
            if index >= labels.classes() {
                return Err(Error::LocalizationFailed(format!(
                    "fixed class {index} not below {}",
                    labels.classes()
                )));
            }
            Ok(index)
        }
        ClassSelection::AutoLowFa {
            min_fraction,
            max_fraction,
        } => {
            let n = labels.len() as f64;
            let mut counts = vec![0usize; labels.classes() as usize];
            for &l in labels.labels() {
                counts[l as usize] += 1;
            }
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|&a, &b| {
                let ma = mixture.means.get(a).copied().unwrap_or(f64::INFINITY);
                let mb = mixture.means.get(b).copied().unwrap_or(f64::INFINITY);
                ma.total_cmp(&mb)
            });
            order
                .into_iter()
                .find(|&k| {
                    let f = counts[k] as f64 / n;
                    f >= min_fraction && f <= max_fraction
                })
                .map(|k| k as u8)
                .ok_or_else(|| {
                    Error::LocalizationFailed(format!(
                        "no class holds between {min_fraction} and {max_fraction} of the volume"
                    ))
                })
        }
    }
}

fn box_from_mask(mask: &Mask2, margin: usize, min_blob_area: usize) -> Result<DetectionBox> {
    let data = filter_small_blobs_2d(&mask.data, mask.nx, mask.ny, min_blob_area);
    let filtered = Mask2 {
        nx: mask.nx,
        ny: mask.ny,
        data,
    };
    filtered
        .bounds()
        .map(|b| b.expand(margin, mask.nx, mask.ny))
        .ok_or_else(|| Error::LocalizationFailed("empty projected mask".into()))
}

/// Tight in-plane bounds of `class`, grown by the margin and clamped.
pub fn detect_box(labels: &LabelVolume, class: u8, cfg: &LocalizeConfig) -> Result<DetectionBox> {
    let mask = match cfg.projection {
        Projection::MaxOverZ => project_max_z(labels, class),
        Projection::CentralSlice => slice_mask(labels, class, labels.dims()[2] / 2),
    };
    box_from_mask(&mask, cfg.margin_px, cfg.min_blob_area)
}

/// In-plane box around the largest 6-connected component of `vol >= threshold`.
pub fn largest_component_box(vol: &Volume3, threshold: f32, margin: usize) -> Result<DetectionBox> {
    let mask: Vec<bool> = vol.data().iter().map(|&v| v >= threshold).collect();
    let cc = label_components(&mask, vol.dims());
    let id = cc
        .largest()
        .ok_or_else(|| Error::LocalizationFailed(format!("no voxel at or above {threshold}")))?;
    let [nx, ny, _] = vol.dims();
    let mut m = Mask2::new(nx, ny);
    for (i, &l) in cc.labels.iter().enumerate() {
        if l == id {
            m.set(i % nx, (i / nx) % ny, true);
        }
    }
    box_from_mask(&m, margin, 1)
}

/// Otsu threshold over a `bins`-bin histogram; returns the upper edge of the
/// best split bin, so `v >= t` is the bright class.
pub fn otsu_threshold(vol: &Volume3, bins: usize) -> Result<f32> {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) || bins < 2 {
        return Err(Error::Degenerate("Otsu threshold of a constant volume".into()));
    }
    let width = (hi - lo) as f64 / bins as f64;
    let mut hist = vec![0f64; bins];
    for &v in vol.data() {
        let b = (((v - lo) as f64 / width) as usize).min(bins - 1);
        hist[b] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, h)| i as f64 * h).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0usize, -1.0);
    for (i, &h) in hist.iter().enumerate().take(bins - 1) {
        w0 += h;
        sum0 += i as f64 * h;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best_var {
            best_var = between;
            best = i;
        }
    }
    Ok(lo + ((best + 1) as f64 * width) as f32)
}

/// Output of [`localize_and_crop`].
#[derive(Debug, Clone)]
pub struct Localization {
    /// MD crop resampled to `crop_dims`.
    pub crop: Volume3,
    pub bbox: DetectionBox,
    pub class: u8,
    pub em: EmResult,
}

/// EM on the FA channel, kidney class selection, box detection, then crop
/// and resample of the MD channel.
pub fn localize_and_crop(fa: &Volume3, md: &Volume3, cfg: &LocalizeConfig, em_cfg: &EmConfig) -> Result<Localization> {
    if fa.dims() != md.dims() {
        return Err(Error::DimMismatch(format!("FA {:?} vs MD {:?}", fa.dims(), md.dims())));
    }
    let em = em_segment(fa, em_cfg).map_err(|e| match e {
        Error::Degenerate(d) => Error::LocalizationFailed(format!("EM failed: {d}")),
        other => other,
    })?;
    let class = select_kidney_class(&em.labels, &em.mixture, &cfg.class_selection)?;
    let bbox = detect_box(&em.labels, class, cfg)?;
    let crop = resize_trilinear(&crop(md, &bbox)?, cfg.crop_dims)?;
    Ok(Localization { crop, bbox, class, em })
}
