use std::collections::BTreeSet;

use proptest::prelude::*;
use renalseg_core::synthkid::*;
use renalseg_core::volgrid::{lab3_to_bytes, vol3_to_bytes};

fn small(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        n_subjects: 2,
        timepoints_per_subject: 2,
        ..PhantomSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_deterministic_and_sized(seed in any::<u64>()) {
        let spec = small(seed);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        let (lo, hi) = spec.kidney_volume_range;
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(vol3_to_bytes(&x.fa), vol3_to_bytes(&y.fa));
            prop_assert_eq!(vol3_to_bytes(&x.md), vol3_to_bytes(&y.md));
            prop_assert_eq!(lab3_to_bytes(&x.truth), lab3_to_bytes(&y.truth));
            let count = x.truth.count(1);
            prop_assert!(count >= lo && count <= hi, "{} kidney voxels", count);
        }
    }

    #[test]
    fn truth_voxels_sit_in_the_kidney_band(seed in any::<u64>()) {
        let spec = PhantomSpec { noise_sigma: 0.0, ..small(seed) };
        for (anatomy, case) in generate_with_anatomy(&spec).unwrap() {
            for (i, &t) in case.truth.labels().iter().enumerate() {
                prop_assert_eq!(t == 1, anatomy.tissue[i] == Tissue::Kidney);
            }
        }
    }
}

#[test]
fn subject_splits_partition_the_default_suite() {
    let spec = PhantomSpec {
        dims: [40, 40, 6],
        kidney_volume_range: (100, 2000),
        ..PhantomSpec::default()
    };
    let cases = generate(&spec).unwrap();
    assert_eq!(cases.len(), 60);
    let split = split_by_subject(&cases, 3).unwrap();
    assert_eq!((split.test.len(), split.train.len()), (4, 56));
    let mut seen = BTreeSet::new();
    for s in 0..15 {
        let split = split_by_subject(&cases, s).unwrap();
        let train: BTreeSet<String> = split.train.iter().map(|c| c.id()).collect();
        for c in &split.test {
            assert!(!train.contains(&c.id()));
            seen.insert(c.id());
        }
    }
    assert_eq!(seen.len(), 60);
    assert!(split_by_subject(&cases, 15).is_err());
}
