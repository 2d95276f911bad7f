use super::{linear_index, DetectionBox, Dims, LabelVolume, Mask2, Volume3};
use crate::error::{Error, Result};

fn crop_data<T: Copy>(data: &[T], dims: Dims, b: &DetectionBox) -> Vec<T> {
    let mut out = Vec::with_capacity(b.width() * b.height() * dims[2]);
    for z in 0..dims[2] {
        for y in b.y0..=b.y1 {
            let start = linear_index(dims, b.x0, y, z);
            out.extend_from_slice(&data[start..start + b.width()]);
        }
    }
    out
}

/// In-plane crop keeping every slice.
pub fn crop(vol: &Volume3, b: &DetectionBox) -> Result<Volume3> {
    b.validate(vol.dims())?;
    let dims = [b.width(), b.height(), vol.dims()[2]];
    Volume3::new(dims, vol.spacing(), crop_data(vol.data(), vol.dims(), b))
}

pub fn crop_labels(labels: &LabelVolume, b: &DetectionBox) -> Result<LabelVolume> {
    b.validate(labels.dims())?;
    let dims = [b.width(), b.height(), labels.dims()[2]];
    LabelVolume::new(
        dims,
        labels.spacing(),
        labels.classes(),
        crop_data(labels.labels(), labels.dims(), b),
    )
}

/// Place `inner` at `b` inside a zero (class 0) grid of `dims`; the inverse
/// of [`crop_labels`] for voxels inside the box.
pub fn paste_labels(inner: &LabelVolume, b: &DetectionBox, dims: Dims, spacing: [f32; 3]) -> Result<LabelVolume> {
    b.validate(dims)?;
    if inner.dims() != [b.width(), b.height(), dims[2]] {
        return Err(Error::DimMismatch(format!(
            "crop {:?} does not fit box {b:?} with {} slices",
            inner.dims(),
            dims[2]
        )));
    }
    let mut out = vec![0u8; dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..b.height() {
            let src = linear_index(inner.dims(), 0, y, z);
            let dst = linear_index(dims, b.x0, b.y0 + y, z);
            out[dst..dst + b.width()].copy_from_slice(&inner.labels()[src..src + b.width()]);
        }
    }
    LabelVolume::new(dims, spacing, inner.classes(), out)
}

/// Corner-aligned sample positions: output j maps to j (n-1)/(m-1).
fn positions(n: usize, m: usize) -> impl Iterator<Item = f64> {
    (0..m).map(move |j| {
        if n == 1 || m == 1 {
            0.0
        } else {
            j as f64 * (n - 1) as f64 / (m - 1) as f64
        }
    })
}

/// Linear resampling of the middle axis of an `[outer, n, inner]` array.
fn lerp_axis(src: &[f64], outer: usize, n: usize, inner: usize, m: usize) -> Vec<f64> {
    let table: Vec<(usize, f64)> = positions(n, m)
        .map(|p| {
            let i0 = (p.floor() as usize).min(n.saturating_sub(2));
            (i0, p - i0 as f64)
        })
        .collect();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, t)) in table.iter().enumerate() {
            let dst = (o * m + j) * inner;
            let a = (o * n + i0) * inner;
            if n == 1 || t == 0.0 {
                out[dst..dst + inner].copy_from_slice(&src[a..a + inner]);
            } else {
                for k in 0..inner {
                    out[dst + k] = (1.0 - t) * src[a + k] + t * src[a + inner + k];
                }
            }
        }
    }
    out
}

fn resized_spacing(spacing: [f32; 3], from: Dims, to: Dims) -> [f32; 3] {
    [0, 1, 2].map(|a| spacing[a] * from[a] as f32 / to[a] as f32)
}

/// Trilinear resampling with corner-aligned sampling. Spacing is rescaled so
/// the physical extent `n * spacing` is kept.
pub fn resize_trilinear(vol: &Volume3, target: Dims) -> Result<Volume3> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::InvalidVolume(format!("target dims {target:?} must be positive")));
    }
    let [nx, ny, nz] = vol.dims();
    let [mx, my, mz] = target;
    let src: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let a = lerp_axis(&src, ny * nz, nx, 1, mx);
    let a = lerp_axis(&a, nz, ny, mx, my);
    let a = lerp_axis(&a, 1, nz, mx * my, mz);
    let (lo, hi) = vol.min_max();
    // Clamp guards the last-ulp overshoot of f64 -> f32 rounding.
    let data = a.into_iter().map(|v| (v as f32).clamp(lo, hi)).collect();
    Volume3::new(target, resized_spacing(vol.spacing(), vol.dims(), target), data)
}

/// Nearest-neighbour resampling for categorical grids, same sample
/// positions as [`resize_trilinear`].
pub fn resize_nearest_labels(labels: &LabelVolume, target: Dims) -> Result<LabelVolume> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::InvalidVolume(format!("target dims {target:?} must be positive")));
    }
    let dims = labels.dims();
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| positions(dims[a], target[a]).map(|p| p.round() as usize).collect())
        .collect();
    let mut out = Vec::with_capacity(target.iter().product());
    for &z in &maps[2] {
        for &y in &maps[1] {
            for &x in &maps[0] {
                out.push(labels.get(x, y, z));
            }
        }
    }
    LabelVolume::new(
        target,
        resized_spacing(labels.spacing(), dims, target),
        labels.classes(),
        out,
    )
}

/// Generic in-plane remap: output (x', y') of an `out_dims` grid reads input
/// `src(x', y')`.
fn remap<T: Copy>(data: &[T], dims: Dims, out_dims: Dims, src: impl Fn(usize, usize) -> (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let (sx, sy) = src(x, y);
                out.push(data[linear_index(dims, sx, sy, z)]);
            }
        }
    }
    out
}

// rot90: input (x, y) lands at (ny - 1 - y, x); output dims (ny, nx, nz).
fn rot90_data<T: Copy>(data: &[T], dims: Dims) -> (Vec<T>, Dims) {
    let out_dims = [dims[1], dims[0], dims[2]];
    let ny = dims[1];
    (remap(data, dims, out_dims, |x, y| (y, ny - 1 - x)), out_dims)
}

fn flip_lr_data<T: Copy>(data: &[T], dims: Dims) -> Vec<T> {
    remap(data, dims, dims, |x, y| (dims[0] - 1 - x, y))
}

fn flip_ud_data<T: Copy>(data: &[T], dims: Dims) -> Vec<T> {
    remap(data, dims, dims, |x, y| (x, dims[1] - 1 - y))
}

fn swap_xy(s: [f32; 3]) -> [f32; 3] {
    [s[1], s[0], s[2]]
}

/// Quarter turn in the x-y plane, applied to every slice.
pub fn rot90_xy(vol: &Volume3) -> Volume3 {
    let (data, dims) = rot90_data(vol.data(), vol.dims());
    Volume3::new(dims, swap_xy(vol.spacing()), data).expect("permutation of a valid volume")
}

pub fn flip_lr(vol: &Volume3) -> Volume3 {
    Volume3::new(vol.dims(), vol.spacing(), flip_lr_data(vol.data(), vol.dims())).expect("permutation")
}

pub fn flip_ud(vol: &Volume3) -> Volume3 {
    Volume3::new(vol.dims(), vol.spacing(), flip_ud_data(vol.data(), vol.dims())).expect("permutation")
}

pub fn rot90_xy_labels(l: &LabelVolume) -> LabelVolume {
    let (data, dims) = rot90_data(l.labels(), l.dims());
    LabelVolume::new(dims, swap_xy(l.spacing()), l.classes(), data).expect("permutation")
}

pub fn flip_lr_labels(l: &LabelVolume) -> LabelVolume {
    LabelVolume::new(l.dims(), l.spacing(), l.classes(), flip_lr_data(l.labels(), l.dims())).expect("permutation")
}

pub fn flip_ud_labels(l: &LabelVolume) -> LabelVolume {
    LabelVolume::new(l.dims(), l.spacing(), l.classes(), flip_ud_data(l.labels(), l.dims())).expect("permutation")
}

/// Pixel (x, y) is set iff some slice carries `class` there.
pub fn project_max_z(labels: &LabelVolume, class: u8) -> Mask2 {
    let [nx, ny, nz] = labels.dims();
    let mut m = Mask2::new(nx, ny);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels.get(x, y, z) == class {
                    m.set(x, y, true);
                }
            }
        }
    }
    m
}

/// Binary map of `class` in slice `z`.
pub fn slice_mask(labels: &LabelVolume, class: u8, z: usize) -> Mask2 {
    let [nx, ny, _] = labels.dims();
    let mut m = Mask2::new(nx, ny);
    for y in 0..ny {
        for x in 0..nx {
            m.set(x, y, labels.get(x, y, z) == class);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap()
    }

    #[test]
    fn crop_examples() {
        let v = ramp([110, 110, 15]);
        let b = DetectionBox {
            x0: 5,
            x1: 10,
            y0: 2,
            y1: 12,
        };
        let c = crop(&v, &b).unwrap();
        assert_eq!(c.dims(), [6, 11, 15]);
        assert_eq!(c.get(0, 0, 3), v.get(5, 2, 3));

        assert_eq!(crop(&v, &DetectionBox::full(v.dims())).unwrap(), v);

        let col = crop(
            &v,
            &DetectionBox {
                x0: 7,
                x1: 7,
                y0: 9,
                y1: 9,
            },
        )
        .unwrap();
        assert_eq!(col.dims(), [1, 1, 15]);
        let expected: Vec<f32> = (0..15).map(|z| (7 + 90 + 100 * z) as f32).collect();
        assert_eq!(col.data(), expected.as_slice());

        assert!(crop(
            &v,
            &DetectionBox {
                x0: 100,
                x1: 110,
                y0: 0,
                y1: 1
            }
        )
        .is_err());
    }

    #[test]
    fn hot_voxel_rotation() {
        let mut data = vec![0.0; 16];
        data[linear_index([4, 4, 1], 1, 2, 0)] = 1.0;
        let v = Volume3::new([4, 4, 1], [1.0; 3], data).unwrap();
        let r = rot90_xy(&v);
        // (x, y) -> (ny - 1 - y, x) = (1, 1)
        assert_eq!(r.get(1, 1, 0), 1.0);
        assert_eq!(r.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn rot90_swaps_dims() {
        let v = ramp([5, 3, 2]);
        let r = rot90_xy(&v);
        assert_eq!(r.dims(), [3, 5, 2]);
        let r4 = rot90_xy(&rot90_xy(&rot90_xy(&r)));
        assert_eq!(r4, v);
    }

    #[test]
    fn resize_identity_and_ramp() {
        let v = ramp([7, 5, 4]);
        let same = resize_trilinear(&v, v.dims()).unwrap();
        assert!(same.data().iter().zip(v.data()).all(|(a, b)| (a - b).abs() < 1e-6));

        let line = Volume3::from_fn([9, 3, 2], [1.0; 3], |x, _, _| x as f32).unwrap();
        let up = resize_trilinear(&line, [17, 3, 2]).unwrap();
        for x in 0..17 {
            assert!((up.get(x, 1, 1) - x as f32 * 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn projection_union_of_slices() {
        let dims = [6, 6, 3];
        let mut l = vec![0u8; 108];
        l[linear_index(dims, 1, 1, 0)] = 1;
        l[linear_index(dims, 1, 2, 0)] = 1;
        l[linear_index(dims, 4, 4, 2)] = 1;
        let lv = LabelVolume::new(dims, [1.0; 3], 2, l).unwrap();
        let m = project_max_z(&lv, 1);
        let mut brute = Mask2::new(6, 6);
        for z in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    if lv.get(x, y, z) == 1 {
                        brute.set(x, y, true);
                    }
                }
            }
        }
        assert_eq!(m, brute);
        assert_eq!(m.count(), 3);
        let empty = LabelVolume::new(dims, [1.0; 3], 2, vec![0; 108]).unwrap();
        assert_eq!(project_max_z(&empty, 1).count(), 0);
        assert_eq!(slice_mask(&lv, 1, 2).count(), 1);
    }

    #[test]
    fn paste_inverts_crop_inside_box() {
        let dims = [8, 7, 2];
        let l = LabelVolume::new(dims, [1.0; 3], 2, (0..112).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let b = DetectionBox {
            x0: 2,
            x1: 5,
            y0: 1,
            y1: 4,
        };
        let c = crop_labels(&l, &b).unwrap();
        let p = paste_labels(&c, &b, dims, [1.0; 3]).unwrap();
        for z in 0..2 {
            for y in 0..7 {
                for x in 0..8 {
                    let want = if b.contains(x, y) { l.get(x, y, z) } else { 0 };
                    assert_eq!(p.get(x, y, z), want);
                }
            }
        }
    }
}
