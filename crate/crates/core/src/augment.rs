//! Training-set expansion: histogram matching to a reference contrast,
//! in-plane rotations and flips, and 5x through-plane upscaling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{
    flip_lr, flip_lr_labels, flip_ud, flip_ud_labels, resize_trilinear, rot90_xy, rot90_xy_labels, DetectionBox,
    LabelVolume, Volume3,
};

pub const DEFAULT_BINS: usize = 256;

/// Equal-width histogram over `[lo, hi]` with a piecewise-linear CDF.
#[derive(Debug, Clone)]
struct Cdf {
    lo: f64,
    width: f64,
    /// `edges[j]` is the CDF at `lo + j * width`; `bins + 1` entries.
    edges: Vec<f64>,
}

impl Cdf {
    fn new(vol: &Volume3, bins: usize, what: &str) -> Result<Self> {
        let (lo, hi) = vol.min_max();
        if !(hi > lo) {
            return Err(Error::Degenerate(format!("{what} volume is constant")));
        }
        let (lo, hi) = (lo as f64, hi as f64);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in vol.data() {
            counts[bin_of(v as f64, lo, width, bins)] += 1;
        }
        let n = vol.len() as f64;
        let mut edges = Vec::with_capacity(bins + 1);
        let mut acc = 0usize;
        edges.push(0.0);
        for c in counts {
            acc += c;
            edges.push(acc as f64 / n);
        }
        Ok(Self { lo, width, edges })
    }

    fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    fn eval(&self, x: f64) -> f64 {
        let j = bin_of(x, self.lo, self.width, self.bins());
        let t = ((x - self.lo) / self.width - j as f64).clamp(0.0, 1.0);
        self.edges[j] + t * (self.edges[j + 1] - self.edges[j])
    }

    /// Largest `x` with `eval(x) <= u`.
    fn inverse(&self, u: f64) -> f64 {
        let bins = self.bins();
        // last edge whose CDF does not exceed u
        let e = self.edges.partition_point(|&c| c <= u).max(1) - 1;
        if e >= bins {
            return self.lo + bins as f64 * self.width;
        }
        let (a, b) = (self.edges[e], self.edges[e + 1]);
        let t = if b > a {
            ((u - a) / (b - a)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.lo + (e as f64 + t) * self.width
    }
}

fn bin_of(x: f64, lo: f64, width: f64, bins: usize) -> usize {
    (((x - lo) / width).max(0.0) as usize).min(bins - 1)
}

/// Map `src` intensities through `CDF_ref^-1 ∘ CDF_src`.
pub fn histogram_match(src: &Volume3, reference: &Volume3, bins: usize) -> Result<Volume3> {
    if bins < 2 {
        return Err(Error::Degenerate(format!("{bins} histogram bins")));
    }
    let s = Cdf::new(src, bins, "source")?;
    let r = Cdf::new(reference, bins, "reference")?;
    let (rlo, rhi) = reference.min_max();
    src.map(|v| (r.inverse(s.eval(v as f64)) as f32).clamp(rlo, rhi))
}

/// Normalized histograms of `a` and `b` over `[lo, hi]`, compared in L1 (range 0..=2).
pub fn histogram_l1(a: &Volume3, b: &Volume3, lo: f32, hi: f32, bins: usize) -> f64 {
    let width = (hi - lo) as f64 / bins as f64;
    let hist = |v: &Volume3| {
        let mut h = vec![0.0; bins];
        for &x in v.data() {
            h[bin_of(x as f64, lo as f64, width, bins)] += 1.0 / v.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contrast {
    Original,
    HistogramMatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    Identity,
    Rot90,
    FlipLr,
    FlipUd,
    /// Left-right flip followed by a quarter turn.
    Rot90FlipLr,
}

impl Geometry {
    pub const ALL: [Geometry; 5] = [
        Geometry::Identity,
        Geometry::Rot90,
        Geometry::FlipLr,
        Geometry::FlipUd,
        Geometry::Rot90FlipLr,
    ];

    pub fn apply(self, vol: &Volume3) -> Volume3 {
        match self {
            Geometry::Identity => vol.clone(),
            Geometry::Rot90 => rot90_xy(vol),
            Geometry::FlipLr => flip_lr(vol),
            Geometry::FlipUd => flip_ud(vol),
            Geometry::Rot90FlipLr => rot90_xy(&flip_lr(vol)),
        }
    }

    /// Where an in-plane box of an `nx` x `ny` grid lands under this transform.
    pub fn apply_box(self, b: &DetectionBox, nx: usize, ny: usize) -> DetectionBox {
        let rot = |b: &DetectionBox, ny: usize| DetectionBox {
            x0: ny - 1 - b.y1,
            x1: ny - 1 - b.y0,
            y0: b.x0,
            y1: b.x1,
        };
        let lr = |b: &DetectionBox| DetectionBox {
            x0: nx - 1 - b.x1,
            x1: nx - 1 - b.x0,
            ..*b
        };
        match self {
            Geometry::Identity => *b,
            Geometry::Rot90 => rot(b, ny),
            Geometry::FlipLr => lr(b),
            Geometry::FlipUd => DetectionBox {
                y0: ny - 1 - b.y1,
                y1: ny - 1 - b.y0,
                ..*b
            },
            Geometry::Rot90FlipLr => rot(&lr(b), ny),
        }
    }

    pub fn apply_labels(self, labels: &LabelVolume) -> LabelVolume {
        match self {
            Geometry::Identity => labels.clone(),
            Geometry::Rot90 => rot90_xy_labels(labels),
            Geometry::FlipLr => flip_lr_labels(labels),
            Geometry::FlipUd => flip_ud_labels(labels),
            Geometry::Rot90FlipLr => rot90_xy_labels(&flip_lr_labels(labels)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub contrast: Contrast,
    pub geometry: Geometry,
}

/// The ten variants produced per training case, contrast-major.
pub fn variant_lattice() -> Vec<Variant> {
    [Contrast::Original, Contrast::HistogramMatched]
        .into_iter()
        .flat_map(|contrast| {
            Geometry::ALL
                .into_iter()
                .map(move |geometry| Variant { contrast, geometry })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AugmentedCase {
    /// Index of the source case in the input list.
    pub source: usize,
    pub variant: Variant,
    pub image: Volume3,
    pub labels: LabelVolume,
}

/// Expand every case into the full contrast x geometry lattice.
pub fn expand_training_set(
    cases: &[(Volume3, LabelVolume)],
    reference: &Volume3,
    bins: usize,
) -> Result<Vec<AugmentedCase>> {
    let lattice = variant_lattice();
    let per_case: Vec<Vec<AugmentedCase>> = cases
        .par_iter()
        .enumerate()
        .map(|(source, (image, labels))| {
            let matched = histogram_match(image, reference, bins)?;
            Ok(lattice
                .iter()
                .map(|&variant| {
                    let base = match variant.contrast {
                        Contrast::Original => image,
                        Contrast::HistogramMatched => &matched,
                    };
                    AugmentedCase {
                        source,
                        variant,
                        image: variant.geometry.apply(base),
                        labels: variant.geometry.apply_labels(labels),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

/// Trilinear 5x upsampling along z (corner-aligned); z spacing shrinks 5x.
pub fn upscale_z_5x(vol: &Volume3) -> Result<Volume3> {
    let [nx, ny, nz] = vol.dims();
    if nz < 2 {
        return Err(Error::Degenerate(format!("{nz} slices cannot be upscaled")));
    }
    let out = resize_trilinear(vol, [nx, ny, 5 * nz])?;
    let [sx, sy, sz] = vol.spacing();
    out.with_spacing([sx, sy, sz / 5.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], f).unwrap()
    }

    #[test]
    fn self_match_within_one_bin() {
        let v = ramp([17, 13, 3], |x, y, z| ((x * 7 + y * 3 + z * 11) % 23) as f32 * 0.37);
        let m = histogram_match(&v, &v, 256).unwrap();
        let (lo, hi) = v.min_max();
        let bin = (hi - lo) / 256.0;
        for (a, b) in v.data().iter().zip(m.data()) {
            assert!((a - b).abs() <= bin + 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn uniform_to_uniform_is_affine() {
        let src = ramp([1000, 1, 1], |x, _, _| x as f32);
        let dst = ramp([1000, 1, 1], |x, _, _| 5.0 + 2.0 * x as f32);
        let m = histogram_match(&src, &dst, 256).unwrap();
        let bin = 2.0 * 999.0 / 256.0;
        for (x, &v) in m.data().iter().enumerate() {
            let expect = 5.0 + 2.0 * x as f32;
            assert!((v - expect).abs() <= bin, "{x}: {v} vs {expect}");
        }
    }

    #[test]
    fn constant_inputs_are_degenerate() {
        let c = Volume3::filled([4, 4, 2], [1.0; 3], 1.0).unwrap();
        let r = ramp([4, 4, 2], |x, _, _| x as f32);
        assert!(histogram_match(&c, &r, 256).is_err());
        assert!(histogram_match(&r, &c, 256).is_err());
    }

    #[test]
    fn one_case_expands_to_ten() {
        let img = ramp([6, 6, 2], |x, y, z| (x + 2 * y + z) as f32);
        let lab = LabelVolume::from_mask([6, 6, 2], [1.0; 3], (0..72).map(|i| i % 5 == 0)).unwrap();
        let out = expand_training_set(&[(img, lab.clone())], &ramp([6, 6, 2], |x, _, _| x as f32 * 3.0), 256).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(
            out.iter().filter(|c| c.variant.geometry == Geometry::Identity).count(),
            2
        );
        for c in &out {
            assert_eq!(c.labels.count(1), lab.count(1));
        }
        assert_eq!(out[0].labels, lab);
    }

    #[test]
    fn boxes_follow_their_volumes() {
        let dims = [9, 6, 1];
        let b = DetectionBox {
            x0: 1,
            x1: 3,
            y0: 2,
            y1: 4,
        };
        let mut mask = vec![false; 54];
        for y in 2..=4 {
            for x in 1..=3 {
                mask[x + 9 * y] = true;
            }
        }
        let lab = LabelVolume::from_mask(dims, [1.0; 3], mask).unwrap();
        for g in Geometry::ALL {
            let moved = g.apply_labels(&lab);
            let [nx, ny, _] = moved.dims();
            let mut m = crate::volgrid::Mask2::new(nx, ny);
            for y in 0..ny {
                for x in 0..nx {
                    m.set(x, y, moved.get(x, y, 0) == 1);
                }
            }
            assert_eq!(m.bounds(), Some(g.apply_box(&b, 9, 6)), "{g:?}");
        }
    }

    #[test]
    fn upscale_dims_and_ramp() {
        let v = ramp([4, 3, 15], |_, _, z| 2.0 * z as f32 + 1.0);
        let u = upscale_z_5x(&v).unwrap();
        assert_eq!(u.dims(), [4, 3, 75]);
        assert!((u.spacing()[2] - 0.2).abs() < 1e-7);
        for z in 0..75 {
            let expect = 1.0 + 2.0 * (z as f32 * 14.0 / 74.0);
            assert!((u.get(1, 1, z) - expect).abs() <= 1e-5 * expect.abs().max(1.0), "{z}");
        }
        let c = upscale_z_5x(&Volume3::filled([2, 2, 3], [1.0, 1.0, 2.0], 0.5).unwrap()).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.5));
        assert!(upscale_z_5x(&Volume3::filled([2, 2, 1], [1.0; 3], 0.5).unwrap()).is_err());
    }
}
