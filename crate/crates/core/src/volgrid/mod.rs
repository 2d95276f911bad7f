//! Volume and label grids, bit-exact `.vol3` / `.lab3` files and the
//! in-plane geometry used throughout the pipeline.
//!
//! All grids are x-fastest: voxel (x, y, z) lives at `x + nx * (y + ny * z)`.

mod geometry;
mod io;

pub use geometry::{
    crop, crop_labels, flip_lr, flip_lr_labels, flip_ud, flip_ud_labels, paste_labels, project_max_z,
    resize_nearest_labels, resize_trilinear, rot90_xy, rot90_xy_labels, slice_mask,
};
pub use io::{
    lab3_from_bytes, lab3_to_bytes, read_lab3, read_vol3, vol3_from_bytes, vol3_to_bytes, write_lab3, write_vol3,
    LAB3_MAGIC, VOL3_MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent (nx, ny, nz).
pub type Dims = [usize; 3];

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

fn check_dims(dims: Dims, len: usize, spacing: [f32; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidVolume(format!("non-positive dims {dims:?}")));
    }
    if dims[0] * dims[1] * dims[2] != len {
        return Err(Error::InvalidVolume(format!("{len} voxels for dims {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
    }
    Ok(())
}

/// Dense scalar volume with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims, data.len(), spacing)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: [f32; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn from_fn(dims: Dims, spacing: [f32; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copy with every value passed through `f`; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        check_dims(self.dims, self.data.len(), spacing)?;
        self.spacing = spacing;
        Ok(self)
    }
}

/// Integer class map aligned with a [`Volume3`]; every label is `< classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: [f32; 3],
    classes: u8,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: [f32; 3], classes: u8, labels: Vec<u8>) -> Result<Self> {
        check_dims(dims, labels.len(), spacing)?;
        if classes == 0 {
            return Err(Error::InvalidVolume("class count must be positive".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::InvalidVolume(format!(
                "label {} at voxel {i} not below class count {classes}",
                labels[i]
            )));
        }
        Ok(Self {
            dims,
            spacing,
            classes,
            labels,
        })
    }

    /// Binary (K = 2) mask from a predicate over voxels.
    pub fn from_mask(dims: Dims, spacing: [f32; 3], mask: impl IntoIterator<Item = bool>) -> Result<Self> {
        Self::new(dims, spacing, 2, mask.into_iter().map(u8::from).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn classes(&self) -> u8 {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[linear_index(self.dims, x, y, z)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Binary mask of one class.
    pub fn select(&self, class: u8) -> LabelVolume {
        LabelVolume {
            dims: self.dims,
            spacing: self.spacing,
            classes: 2,
            labels: self.labels.iter().map(|&l| u8::from(l == class)).collect(),
        }
    }
}

/// Axis-aligned in-plane rectangle with inclusive bounds, swept through
/// every slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl DetectionBox {
    pub fn full(dims: Dims) -> Self {
        Self {
            x0: 0,
            x1: dims[0] - 1,
            y0: 0,
            y1: dims[1] - 1,
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.x0 > self.x1 || self.y0 > self.y1 || self.x1 >= dims[0] || self.y1 >= dims[1] {
            return Err(Error::Bounds(format!("{self:?} against dims {dims:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn contains_box(&self, other: &DetectionBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Grow by `margin` on every side, clamped to an `nx` x `ny` grid.
    pub fn expand(&self, margin: usize, nx: usize, ny: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(margin),
            x1: (self.x1 + margin).min(nx - 1),
            y0: self.y0.saturating_sub(margin),
            y1: (self.y1 + margin).min(ny - 1),
        }
    }

    /// Express `inner`, given in this box's local coordinates, in the
    /// coordinates of the grid this box was cut from.
    pub fn compose(&self, inner: &DetectionBox) -> Self {
        Self {
            x0: self.x0 + inner.x0,
            x1: self.x0 + inner.x1,
            y0: self.y0 + inner.y0,
            y1: self.y0 + inner.y1,
        }
    }
}

/// Binary in-plane mask, x-fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2 {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<bool>,
}

impl Mask2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            data: vec![false; nx * ny],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[x + self.nx * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[x + self.nx * y] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tight inclusive bounds of the set pixels, `None` when empty.
    pub fn bounds(&self) -> Option<DetectionBox> {
        let mut b: Option<DetectionBox> = None;
        for y in 0..self.ny {
            for x in 0..self.nx {
                if !self.get(x, y) {
                    continue;
                }
                b = Some(match b {
                    None => DetectionBox {
                        x0: x,
                        x1: x,
                        y0: y,
                        y1: y,
                    },
                    Some(b) => DetectionBox {
                        x0: b.x0.min(x),
                        x1: b.x1.max(x),
                        y0: b.y0.min(y),
                        y1: b.y1.max(y),
                    },
                });
            }
        }
        b
    }
}
