use proptest::prelude::*;
use renalseg_core::volgrid::*;
use renalseg_core::{DetectionBox, Dims, LabelVolume, Volume3};

fn volume() -> impl Strategy<Value = Volume3> {
    (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(nx, ny, nz)| {
        prop::collection::vec(-1e6f32..1e6, nx * ny * nz)
            .prop_map(move |data| Volume3::new([nx, ny, nz], [0.5, 0.25, 2.0], data).unwrap())
    })
}

fn labels() -> impl Strategy<Value = LabelVolume> {
    (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(nx, ny, nz)| {
        prop::collection::vec(0u8..4, nx * ny * nz)
            .prop_map(move |data| LabelVolume::new([nx, ny, nz], [1.0; 3], 4, data).unwrap())
    })
}

fn nested_boxes() -> impl Strategy<Value = (Dims, DetectionBox, DetectionBox)> {
    (2usize..20, 2usize..20, 1usize..4)
        .prop_flat_map(|(nx, ny, nz)| (Just([nx, ny, nz]), 0..nx, 0..nx, 0..ny, 0..ny))
        .prop_flat_map(|(dims, a, b, c, d)| {
            let outer = DetectionBox {
                x0: a.min(b),
                x1: a.max(b),
                y0: c.min(d),
                y1: c.max(d),
            };
            let (w, h) = (outer.width(), outer.height());
            (Just(dims), Just(outer), 0..w, 0..w, 0..h, 0..h)
        })
        .prop_map(|(dims, outer, a, b, c, d)| {
            let inner = DetectionBox {
                x0: a.min(b),
                x1: a.max(b),
                y0: c.min(d),
                y1: c.max(d),
            };
            (dims, outer, inner)
        })
}

proptest! {
    #[test]
    fn vol3_round_trip_is_bit_exact(v in volume()) {
        let back = vol3_from_bytes(&vol3_to_bytes(&v)).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing(), v.spacing());
        let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn lab3_round_trip(l in labels()) {
        prop_assert_eq!(lab3_from_bytes(&lab3_to_bytes(&l)).unwrap(), l);
    }

    #[test]
    fn flips_are_involutions(v in volume()) {
        prop_assert_eq!(flip_lr(&flip_lr(&v)), v.clone());
        prop_assert_eq!(flip_ud(&flip_ud(&v)), v);
    }

    #[test]
    fn four_quarter_turns_are_identity(v in volume()) {
        let r = rot90_xy(&rot90_xy(&rot90_xy(&rot90_xy(&v))));
        prop_assert_eq!(r, v.clone());
        let half = rot90_xy(&rot90_xy(&v));
        prop_assert_eq!(half, flip_lr(&flip_ud(&v)));
    }

    #[test]
    fn label_transforms_match_volume_transforms(l in labels()) {
        let as_vol = |l: &LabelVolume| {
            Volume3::new(l.dims(), l.spacing(), l.labels().iter().map(|&x| x as f32).collect()).unwrap()
        };
        prop_assert_eq!(as_vol(&rot90_xy_labels(&l)), rot90_xy(&as_vol(&l)));
        prop_assert_eq!(as_vol(&flip_lr_labels(&l)), flip_lr(&as_vol(&l)));
        prop_assert_eq!(as_vol(&flip_ud_labels(&l)), flip_ud(&as_vol(&l)));
    }

    #[test]
    fn nested_crops_compose((dims, outer, inner) in nested_boxes()) {
        let n: usize = dims.iter().product();
        let v = Volume3::new(dims, [1.0; 3], (0..n).map(|i| i as f32).collect()).unwrap();
        let twice = crop(&crop(&v, &outer).unwrap(), &inner).unwrap();
        prop_assert_eq!(twice, crop(&v, &outer.compose(&inner)).unwrap());
    }

    #[test]
    fn paste_inverts_crop_inside_the_box((dims, outer, _) in nested_boxes()) {
        let n: usize = dims.iter().product();
        let l = LabelVolume::new(dims, [1.0; 3], 3, (0..n).map(|i| (i % 3) as u8).collect()).unwrap();
        let pasted = paste_labels(&crop_labels(&l, &outer).unwrap(), &outer, dims, [1.0; 3]).unwrap();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let want = if outer.contains(x, y) { l.get(x, y, z) } else { 0 };
                    prop_assert_eq!(pasted.get(x, y, z), want);
                }
            }
        }
    }

    #[test]
    fn expand_is_clamped_and_monotone((dims, b, _) in nested_boxes(), m1 in 0usize..30, m2 in 0usize..30) {
        let (lo, hi) = (m1.min(m2), m1.max(m2));
        let small = b.expand(lo, dims[0], dims[1]);
        let big = b.expand(hi, dims[0], dims[1]);
        prop_assert!(small.validate(dims).is_ok());
        prop_assert!(big.validate(dims).is_ok());
        prop_assert!(big.contains_box(&small));
        prop_assert!(small.contains_box(&b));
    }

    #[test]
    fn resize_keeps_constants(c in -100f32..100.0, tx in 1usize..9, ty in 1usize..9, tz in 1usize..9) {
        let v = Volume3::filled([5, 4, 3], [1.0; 3], c).unwrap();
        let r = resize_trilinear(&v, [tx, ty, tz]).unwrap();
        prop_assert!(r.data().iter().all(|&x| x == c));
    }
}

#[test]
fn resize_to_same_dims_is_identity() {
    let v = Volume3::from_fn([7, 5, 4], [1.0; 3], |x, y, z| (x * 31 + y * 7 + z) as f32 * 0.37).unwrap();
    let r = resize_trilinear(&v, v.dims()).unwrap();
    let worst = r
        .data()
        .iter()
        .zip(v.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn ramp_stays_linear_when_doubled() {
    let v = Volume3::from_fn([9, 6, 5], [1.0; 3], |x, y, z| {
        x as f32 + 2.0 * y as f32 - 0.5 * z as f32
    })
    .unwrap();
    let r = resize_trilinear(&v, [17, 11, 9]).unwrap();
    // corner-aligned positions: output j samples input j (n - 1) / (m - 1)
    for z in 0..9 {
        for y in 0..11 {
            for x in 0..17 {
                let want = x as f64 * 8.0 / 16.0 + 2.0 * y as f64 * 5.0 / 10.0 - 0.5 * z as f64 * 4.0 / 8.0;
                assert!((r.get(x, y, z) as f64 - want).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn crop_example_dims() {
    let v = Volume3::filled([110, 110, 15], [1.0; 3], 1.0).unwrap();
    let b = DetectionBox {
        x0: 5,
        x1: 10,
        y0: 2,
        y1: 12,
    };
    assert_eq!(crop(&v, &b).unwrap().dims(), [6, 11, 15]);
}

#[test]
fn hot_voxel_follows_quarter_turn() {
    let mut data = vec![0.0f32; 16];
    data[linear_index([4, 4, 1], 1, 2, 0)] = 1.0;
    let r = rot90_xy(&Volume3::new([4, 4, 1], [1.0; 3], data).unwrap());
    // (x, y) -> (ny - 1 - y, x)
    assert_eq!(r.get(1, 1, 0), 1.0);
    assert_eq!(r.data().iter().sum::<f32>(), 1.0);
    let tall = Volume3::filled([3, 5, 2], [1.0; 3], 0.0).unwrap();
    assert_eq!(rot90_xy(&tall).dims(), [5, 3, 2]);
}

#[test]
fn projection_is_union_over_slices() {
    let dims = [6, 6, 10];
    let mut l = vec![0u8; 360];
    l[linear_index(dims, 1, 1, 2)] = 2;
    l[linear_index(dims, 4, 5, 7)] = 2;
    l[linear_index(dims, 3, 3, 7)] = 1;
    let lv = LabelVolume::new(dims, [1.0; 3], 3, l).unwrap();
    let m = project_max_z(&lv, 2);
    assert_eq!(m.count(), 2);
    assert!(m.get(1, 1) && m.get(4, 5));
    assert_eq!(slice_mask(&lv, 2, 7).count(), 1);
    assert_eq!(project_max_z(&lv, 0).count(), 36);
    let empty = LabelVolume::new(dims, [1.0; 3], 4, vec![0; 360]).unwrap();
    assert_eq!(project_max_z(&empty, 3).count(), 0);
}

#[test]
fn wrong_magic_is_a_format_error() {
    let v = Volume3::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
    let mut bytes = vol3_to_bytes(&v);
    assert_eq!(vol3_from_bytes(&bytes).unwrap(), v);
    bytes[1] ^= 0xff;
    assert!(matches!(
        vol3_from_bytes(&bytes),
        Err(renalseg_core::Error::Format { offset: 0, .. })
    ));
}
