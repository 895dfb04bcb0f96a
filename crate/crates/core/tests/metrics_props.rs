use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spdnn_core::metrics::{aggregate_report, compute_metrics, confusion_from_masks, ConfusionCounts, Metric};

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500)
        .prop_filter("nonempty", |c| c.0 + c.1 + c.2 + c.3 > 0)
        .prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
}

fn mcc(c: ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn complement_identities(c in counts()) {
        let r = compute_metrics(c).unwrap();
        let flagged = |m: Metric| r.flagged(m);
        if !flagged(Metric::Specificity) {
            prop_assert_eq!(r.fpr(), 1.0 - r.specificity());
        }
        if !flagged(Metric::Sensitivity) {
            prop_assert_eq!(r.fnr(), 1.0 - r.sensitivity());
        }
        if !flagged(Metric::Precision) {
            prop_assert_eq!(r.fdr(), 1.0 - r.precision());
        }
        if !flagged(Metric::Sensitivity) && !flagged(Metric::Specificity) {
            prop_assert_eq!(r.informedness(), r.sensitivity() + r.specificity() - 1.0);
        }
        if !flagged(Metric::Precision) && !flagged(Metric::Npv) {
            prop_assert_eq!(r.markedness(), r.precision() + r.npv() - 1.0);
        }
        for m in Metric::ALL {
            let (lo, hi) = m.range();
            prop_assert!(r.get(m) >= lo - 1e-12 && r.get(m) <= hi + 1e-12, "{} = {}", m.name(), r.get(m));
        }
    }

    #[test]
    fn mcc_symmetries(c in counts()) {
        let r = compute_metrics(c).unwrap();
        prop_assert!((r.mcc() - mcc(c)).abs() < 1e-12);
        // Swapping the roles of the two classes leaves mcc unchanged.
        let swapped = compute_metrics(ConfusionCounts::new(c.tn, c.tp, c.fn_, c.fp)).unwrap();
        prop_assert!((swapped.mcc() - r.mcc()).abs() < 1e-12);
        // Inverting every prediction negates it.
        let inverted = compute_metrics(ConfusionCounts::new(c.fn_, c.fp, c.tn, c.tp)).unwrap();
        prop_assert!((inverted.mcc() + r.mcc()).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn mask_counts_match_pixel_scan(seed in any::<u64>(), threshold in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        let truth: Vec<u8> = (0..256).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let c = confusion_from_masks(&pred, &truth, threshold).unwrap();
        let mut want = [0u64; 4];
        for i in 0..256 {
            let p = pred[i] as f64 >= threshold;
            let t = truth[i] == 1;
            want[match (p, t) { (true, true) => 0, (false, false) => 1, (true, false) => 2, (false, true) => 3 }] += 1;
        }
        prop_assert_eq!([c.tp, c.tn, c.fp, c.fn_], want);
        prop_assert_eq!(c.total(), 256);
        let r = compute_metrics(c).unwrap();
        let acc = (want[0] + want[1]) as f64 / 256.0;
        prop_assert_eq!(r.accuracy(), acc);
    }
}

#[test]
fn reference_counts() {
    let r = compute_metrics(ConfusionCounts::new(50, 40, 10, 0)).unwrap();
    assert!((r.accuracy() - 0.900000).abs() < 1e-6);
    assert!((r.sensitivity() - 1.000000).abs() < 1e-6);
    assert!((r.specificity() - 0.800000).abs() < 1e-6);
    assert!((r.precision() - 0.833333).abs() < 1e-6);
    assert!((r.informedness() - 0.8).abs() < 1e-12);
    assert!((r.mcc() - 0.816497).abs() < 1e-6);
}

#[test]
fn means_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reports: Vec<_> = (0..100)
        .map(|_| {
            let c = ConfusionCounts::new(
                rng.random_range(1..100),
                rng.random_range(1..100),
                rng.random_range(0..100),
                rng.random_range(0..100),
            );
            compute_metrics(c).unwrap()
        })
        .collect();
    let agg = aggregate_report(&reports).unwrap();
    for m in Metric::ALL {
        let mut s = 0.0;
        for r in &reports {
            s += r.get(m);
        }
        assert!((agg.mean_of(m) - s / 100.0).abs() < 1e-12);
        assert_eq!(agg.histograms[m.index()].counts.iter().sum::<usize>(), 100);
    }
}
