//! Building blocks for two-stage kidney segmentation on diffusion-like
//! volumes: grids and file formats, synthetic phantoms, EM tissue
//! classification, box localization, augmentation and overlap metrics.

pub mod augment;
pub mod emseg;
pub mod error;
pub mod localizer;
pub mod metrics;
pub mod synthkid;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::{DetectionBox, Dims, LabelVolume, Mask2, Volume3};
