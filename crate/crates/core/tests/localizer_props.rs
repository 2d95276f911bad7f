use std::collections::VecDeque;

use proptest::prelude::*;
use renalseg_core::emseg::{EmConfig, GaussianMixture};
use renalseg_core::localizer::*;
use renalseg_core::synthkid::{generate, PhantomSpec};
use renalseg_core::volgrid::linear_index;
use renalseg_core::{DetectionBox, Dims, Error, LabelVolume, Volume3};

/// Flood fill with an explicit queue; components numbered in scan order.
fn bfs_components(mask: &[bool], dims: Dims) -> Vec<u32> {
    let [nx, ny, nz] = dims;
    let mut label = vec![0u32; mask.len()];
    let mut next = 0;
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut nbrs = Vec::new();
            if x > 0 {
                nbrs.push(i - 1)
            }
            if x + 1 < nx {
                nbrs.push(i + 1)
            }
            if y > 0 {
                nbrs.push(i - nx)
            }
            if y + 1 < ny {
                nbrs.push(i + nx)
            }
            if z > 0 {
                nbrs.push(i - nx * ny)
            }
            if z + 1 < nz {
                nbrs.push(i + nx * ny)
            }
            for j in nbrs {
                if mask[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    label
}

fn random_mask() -> impl Strategy<Value = (Dims, Vec<bool>)> {
    (1usize..33, 1usize..33, 1usize..9, 0.1f64..0.7).prop_flat_map(|(nx, ny, nz, p)| {
        (
            Just([nx, ny, nz]),
            prop::collection::vec(prop::bool::weighted(p), nx * ny * nz),
        )
    })
}

fn oracle_box(mask: &[bool], dims: Dims, margin: usize) -> Option<DetectionBox> {
    let label = bfs_components(mask, dims);
    let max_id = *label.iter().max()?;
    if max_id == 0 {
        return None;
    }
    let mut sizes = vec![0usize; max_id as usize + 1];
    for &l in &label {
        sizes[l as usize] += 1;
    }
    let best = (1..=max_id).max_by_key(|&id| (sizes[id as usize], std::cmp::Reverse(id)))?;
    let [nx, ny, _] = dims;
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, &l) in label.iter().enumerate() {
        if l == best {
            let (x, y) = (i % nx, (i / nx) % ny);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    Some(DetectionBox { x0, x1, y0, y1 }.expand(margin, nx, ny))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn union_find_matches_flood_fill((dims, mask) in random_mask()) {
        let cc = label_components(&mask, dims);
        let oracle = bfs_components(&mask, dims);
        // both number components in scan order of their first voxel
        prop_assert_eq!(&cc.labels, &oracle);
        prop_assert_eq!(cc.sizes.iter().sum::<usize>(), mask.iter().filter(|&&m| m).count());
    }

    #[test]
    fn largest_component_box_matches_oracle((dims, mask) in random_mask(), margin in 0usize..6) {
        let vol = Volume3::new(dims, [1.0; 3], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).unwrap();
        let got = largest_component_box(&vol, 0.5, margin).ok();
        prop_assert_eq!(got, oracle_box(&mask, dims, margin));
    }

    #[test]
    fn detected_boxes_are_valid_and_monotone_in_margin((dims, mask) in random_mask(), m1 in 0usize..12, m2 in 0usize..12) {
        prop_assume!(mask.iter().any(|&m| m));
        let labels = LabelVolume::from_mask(dims, [1.0; 3], mask.iter().copied()).unwrap();
        let cfg = |m| LocalizeConfig { margin_px: m, ..LocalizeConfig::default() };
        let a = detect_box(&labels, 1, &cfg(m1.min(m2))).unwrap();
        let b = detect_box(&labels, 1, &cfg(m1.max(m2))).unwrap();
        prop_assert!(a.validate(dims).is_ok());
        prop_assert!(b.validate(dims).is_ok());
        prop_assert!(b.contains_box(&a));
    }
}

#[test]
fn box_follows_the_bigger_blob() {
    let dims = [40, 40, 4];
    let mut v = vec![0.0f32; 6400];
    // 100-voxel block and a 30-voxel block
    for z in 0..4 {
        for y in 0..5 {
            for x in 0..5 {
                v[linear_index(dims, 2 + x, 3 + y, z)] = 1.0;
            }
        }
    }
    for z in 0..3 {
        for y in 0..2 {
            for x in 0..5 {
                v[linear_index(dims, 30 + x, 30 + y, z)] = 1.0;
            }
        }
    }
    let vol = Volume3::new(dims, [1.0; 3], v).unwrap();
    assert_eq!(
        largest_component_box(&vol, 0.5, 0).unwrap(),
        DetectionBox {
            x0: 2,
            x1: 6,
            y0: 3,
            y1: 7
        }
    );
    assert!(matches!(
        largest_component_box(&vol, 2.0, 0),
        Err(Error::LocalizationFailed(_))
    ));

    let mut single = vec![0.0f32; 6400];
    single[linear_index(dims, 9, 11, 2)] = 1.0;
    let vol = Volume3::new(dims, [1.0; 3], single).unwrap();
    assert_eq!(
        largest_component_box(&vol, 0.5, 0).unwrap(),
        DetectionBox {
            x0: 9,
            x1: 9,
            y0: 11,
            y1: 11
        }
    );
}

#[test]
fn class_selection_modes() {
    // 80% class 0, 10% class 1, 10% class 2, means ascending
    let labels: Vec<u8> = (0..1000)
        .map(|i| {
            if i < 800 {
                0
            } else if i < 900 {
                1
            } else {
                2
            }
        })
        .collect();
    let lv = LabelVolume::new([10, 10, 10], [1.0; 3], 3, labels).unwrap();
    let mix = GaussianMixture {
        means: vec![0.1, 0.5, 0.9],
        variances: vec![0.01; 3],
        weights: vec![0.8, 0.1, 0.1],
    };
    let auto = ClassSelection::default();
    assert_eq!(select_kidney_class(&lv, &mix, &auto).unwrap(), 1);
    assert_eq!(
        select_kidney_class(&lv, &mix, &ClassSelection::Fixed { index: 2 }).unwrap(),
        2
    );
    let narrow = ClassSelection::AutoLowFa {
        min_fraction: 0.5,
        max_fraction: 0.6,
    };
    assert!(matches!(
        select_kidney_class(&lv, &mix, &narrow),
        Err(Error::LocalizationFailed(_))
    ));
}

#[test]
fn noiseless_phantoms_are_fully_boxed() {
    let spec = PhantomSpec {
        seed: 11,
        n_subjects: 3,
        timepoints_per_subject: 2,
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    let cfg = LocalizeConfig::default();
    for case in generate(&spec).unwrap() {
        let loc = localize_and_crop(&case.fa, &case.md, &cfg, &EmConfig::default()).unwrap();
        assert_eq!(loc.crop.dims(), [64, 64, 16]);
        let [nx, ny, nz] = case.truth.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if case.truth.get(x, y, z) != 0 {
                        assert!(loc.bbox.contains(x, y), "{} misses ({x}, {y})", case.id());
                    }
                }
            }
        }
    }
}

#[test]
fn constant_fa_fails_localization() {
    let fa = Volume3::filled([30, 30, 5], [1.0; 3], 0.3).unwrap();
    let md = Volume3::filled([30, 30, 5], [1.0; 3], 1.0).unwrap();
    let err = localize_and_crop(&fa, &md, &LocalizeConfig::default(), &EmConfig::default()).unwrap_err();
    assert!(matches!(err, Error::LocalizationFailed(_)), "{err}");
}
