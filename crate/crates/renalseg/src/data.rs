//! Case loading, per-strategy detection and cropping, and mapping crop
//! predictions back onto the full grid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use renalseg_core::augment::{expand_training_set, upscale_z_5x};
use renalseg_core::localizer::{
    largest_component, largest_component_box, localize_and_crop, otsu_threshold, Projection,
};
use renalseg_core::synthkid::{generate, reference_volume, PhantomCase, PhantomSpec};
use renalseg_core::volgrid::{
    crop, crop_labels, lab3_to_bytes, paste_labels, read_lab3, read_vol3, resize_nearest_labels, resize_trilinear,
    vol3_to_bytes, write_lab3, write_vol3,
};
use renalseg_core::{DetectionBox, Dims, LabelVolume, Volume3};

use crate::config::{sha256_hex, ExperimentConfig, Strategy};
use crate::error::{io_err, Result};

/// Cases plus the phantom spec that produced them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub cases: Vec<PhantomCase>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthEntry {
    pub id: String,
    pub subject: u32,
    pub timepoint: u32,
    pub fa: String,
    pub md: String,
    pub truth: String,
}

/// `manifest.json` written next to synthesized cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: PhantomSpec,
    pub cases: Vec<SynthEntry>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => read_dataset(dir),
        None => {
            let spec = cfg.phantom_spec();
            let cases = generate(&spec)?;
            Ok(Dataset { spec, cases })
        }
    }
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<SynthManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(data.cases.len());
    for c in &data.cases {
        let id = c.id();
        let entry = SynthEntry {
            fa: format!("{id}_fa.vol3"),
            md: format!("{id}_md.vol3"),
            truth: format!("{id}_truth.lab3"),
            id,
            subject: c.subject,
            timepoint: c.timepoint,
        };
        write_vol3(&c.fa, dir.join(&entry.fa))?;
        write_vol3(&c.md, dir.join(&entry.md))?;
        write_lab3(&c.truth, dir.join(&entry.truth))?;
        entries.push(entry);
    }
    let manifest = SynthManifest {
        spec: data.spec.clone(),
        cases: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: SynthManifest = serde_json::from_str(&text)?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for e in &manifest.cases {
        cases.push(PhantomCase {
            subject: e.subject,
            timepoint: e.timepoint,
            fa: read_vol3(dir.join(&e.fa))?,
            md: read_vol3(dir.join(&e.md))?,
            truth: read_lab3(dir.join(&e.truth))?,
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        cases,
    })
}

/// SHA-256 over the FA, MD and truth bytes of a case.
pub fn case_hash(case: &PhantomCase) -> String {
    let mut bytes = vol3_to_bytes(&case.fa);
    bytes.extend(vol3_to_bytes(&case.md));
    bytes.extend(lab3_to_bytes(&case.truth));
    sha256_hex(&bytes)
}

/// How a strategy finds its region of interest. `EmOnly` and `Proposed`
/// share one EM run per case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DetectKind {
    Full,
    Threshold,
    Em,
    EmUpscaled,
}

impl DetectKind {
    pub fn of(strategy: Strategy) -> Self {
        match strategy {
            Strategy::UnetRaw => DetectKind::Full,
            Strategy::CcUnet => DetectKind::Threshold,
            Strategy::EmOnly | Strategy::Proposed => DetectKind::Em,
            Strategy::ProposedSr => DetectKind::EmUpscaled,
        }
    }

    pub fn upscaled(self) -> bool {
        self == DetectKind::EmUpscaled
    }
}

/// Detected region of a case on its working grid.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: DetectionBox,
    /// Selected EM class, for EM-based detection.
    pub class: Option<u8>,
    /// The selected class restricted to its largest 3D component, on the
    /// original grid.
    pub em_mask: Option<LabelVolume>,
}

/// Box JSON as written per case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub mode: String,
    pub class: Option<u8>,
}

impl BoxRecord {
    pub fn new(d: &Detection, kind: DetectKind, projection: Projection) -> Self {
        let mode = match kind {
            DetectKind::Full => "full".to_string(),
            DetectKind::Threshold => "otsu-largest-component".to_string(),
            DetectKind::Em | DetectKind::EmUpscaled => match projection {
                Projection::MaxOverZ => "max-over-z".to_string(),
                Projection::CentralSlice => "central-slice".to_string(),
            },
        };
        let b = d.bbox;
        Self {
            x0: b.x0,
            x1: b.x1,
            y0: b.y0,
            y1: b.y1,
            mode,
            class: d.class,
        }
    }
}

/// MD image and truth on the grid a strategy works on.
pub fn working_grid(case: &PhantomCase, kind: DetectKind) -> Result<(Volume3, LabelVolume)> {
    if kind.upscaled() {
        let md = upscale_z_5x(&case.md)?;
        let truth = resize_nearest_labels(&case.truth, md.dims())?;
        Ok((md, truth))
    } else {
        Ok((case.md.clone(), case.truth.clone()))
    }
}

pub fn detect(case: &PhantomCase, kind: DetectKind, cfg: &ExperimentConfig) -> Result<Detection> {
    match kind {
        DetectKind::Full => Ok(Detection {
            bbox: DetectionBox::full(case.md.dims()),
            class: None,
            em_mask: None,
        }),
        DetectKind::Threshold => {
            let t = otsu_threshold(&case.md, cfg.histogram_bins)?;
            Ok(Detection {
                bbox: largest_component_box(&case.md, t, cfg.margin_px)?,
                class: None,
                em_mask: None,
            })
        }
        DetectKind::Em => {
            let loc = localize_and_crop(
                &case.fa,
                &case.md,
                &cfg.localize_config(Strategy::Proposed),
                &cfg.em_config(),
            )?;
            let labels = &loc.em.labels;
            let mask: Vec<bool> = labels.labels().iter().map(|&l| l == loc.class).collect();
            let kidney = largest_component(&mask, labels.dims());
            Ok(Detection {
                bbox: loc.bbox,
                class: Some(loc.class),
                em_mask: Some(LabelVolume::from_mask(labels.dims(), labels.spacing(), kidney)?),
            })
        }
        DetectKind::EmUpscaled => {
            let fa = upscale_z_5x(&case.fa)?;
            let md = upscale_z_5x(&case.md)?;
            let loc = localize_and_crop(&fa, &md, &cfg.localize_config(Strategy::ProposedSr), &cfg.em_config())?;
            Ok(Detection {
                bbox: loc.bbox,
                class: Some(loc.class),
                em_mask: None,
            })
        }
    }
}

/// Crop `(image, truth)` to `bbox` and resample to `dims`.
pub fn crop_pair(
    image: &Volume3,
    truth: &LabelVolume,
    bbox: &DetectionBox,
    dims: Dims,
) -> Result<(Volume3, LabelVolume)> {
    Ok((
        resize_trilinear(&crop(image, bbox)?, dims)?,
        resize_nearest_labels(&crop_labels(truth, bbox)?, dims)?,
    ))
}

/// Training pairs for one case: the plain crop, or with `reference` the ten
/// contrast x geometry variants, each cropped with the box moved along.
pub fn training_pairs(
    case: &PhantomCase,
    kind: DetectKind,
    bbox: &DetectionBox,
    dims: Dims,
    reference: Option<(&Volume3, usize)>,
) -> Result<Vec<(Volume3, LabelVolume)>> {
    let (image, truth) = working_grid(case, kind)?;
    let Some((reference, bins)) = reference else {
        return Ok(vec![crop_pair(&image, &truth, bbox, dims)?]);
    };
    let [nx, ny, _] = image.dims();
    expand_training_set(&[(image, truth)], reference, bins)?
        .into_iter()
        .map(|a| crop_pair(&a.image, &a.labels, &a.variant.geometry.apply_box(bbox, nx, ny), dims))
        .collect()
}

/// Histogram-matching target on the working grid of `kind`.
pub fn reference_for(spec: &PhantomSpec, kind: DetectKind) -> Result<Volume3> {
    let r = reference_volume(spec)?;
    Ok(if kind.upscaled() { upscale_z_5x(&r)? } else { r })
}

/// Put a crop-grid prediction back on the original case grid.
pub fn map_back(pred: &LabelVolume, bbox: &DetectionBox, case: &PhantomCase, kind: DetectKind) -> Result<LabelVolume> {
    let dims = case.truth.dims();
    let spacing = case.truth.spacing();
    let nz = if kind.upscaled() { 5 * dims[2] } else { dims[2] };
    let grid = [dims[0], dims[1], nz];
    let local = resize_nearest_labels(pred, [bbox.width(), bbox.height(), nz])?;
    let full = paste_labels(&local, bbox, grid, spacing)?;
    if kind.upscaled() {
        let back = resize_nearest_labels(&full, dims)?;
        Ok(LabelVolume::new(dims, spacing, back.classes(), back.labels().to_vec())?)
    } else {
        Ok(full)
    }
}

pub fn empty_prediction(case: &PhantomCase) -> LabelVolume {
    LabelVolume::from_mask(
        case.truth.dims(),
        case.truth.spacing(),
        std::iter::repeat(false).take(case.truth.len()),
    )
    .expect("dims come from the truth volume")
}

/// Path of an output file relative to the run directory.
pub fn rel(parts: &[&str]) -> PathBuf {
    parts.iter().collect()
}
