use std::collections::BTreeSet;

use proptest::prelude::*;
use spdnn_core::synth::{generate, load_set, save_set, DataError, SegmentationSet, Split};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_are_valid(seed in any::<u64>(), count in 1usize..40, size in 16usize..40) {
        let set = generate(seed, count, size).unwrap();
        prop_assert_eq!(set.len(), count);
        for (img, mask) in set.images.iter().zip(&set.masks) {
            prop_assert_eq!(img.len(), size * size);
            prop_assert_eq!(mask.len(), size * size);
            prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / mask.len() as f64;
            prop_assert!((0.02..=0.5).contains(&frac), "{frac}");
        }
        prop_assert_eq!(generate(seed, count, size).unwrap(), set);
    }

    #[test]
    fn splits_partition(count in 1usize..2000, seed in any::<u64>()) {
        let s = Split::new(count, seed);
        let all: BTreeSet<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), count);
        prop_assert_eq!(all, (0..count).collect::<BTreeSet<_>>());
        prop_assert_eq!(Split::new(count, seed), s);
    }
}

#[test]
fn default_set_split() {
    let set = generate(42, 1000, 32).unwrap();
    assert_eq!(
        (set.split.train.len(), set.split.validation.len(), set.split.test.len()),
        (600, 200, 200)
    );
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.spdd");
    let set = generate(5, 12, 20).unwrap();
    save_set(&set, &path).unwrap();
    let back = load_set(&path).unwrap();
    assert_eq!(back, set);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"SPDD\x01");
    assert_eq!(bytes.len(), 17 + 12 * 400 * 5);
    std::fs::write(&path, &bytes[..100]).unwrap();
    match load_set(&path) {
        Err(DataError::Truncated { expected, actual }) => assert_eq!((expected, actual), (bytes.len(), 100)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        SegmentationSet::from_bytes(b"NOPE\x01"),
        Err(DataError::Format(_))
    ));
}
