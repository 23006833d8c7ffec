use anomseg::harness::metrics::{auroc, average_precision};
use anomseg::harness::oracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn closed_forms() {
    let labels = [false, false, true, true];
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 4], &labels).unwrap(), 0.5);
    assert_eq!(average_precision(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
    for n in 2..12 {
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut labels = vec![false; n];
        labels[n - 1] = true;
        assert!((average_precision(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }
    let s = [0.1, 0.4, 0.35, 0.8];
    assert_eq!(average_precision(&s, &labels).unwrap(), oracle::average_precision_thresholds(&s, &labels));
}

#[test]
fn errors_on_undefined_inputs() {
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    assert!(average_precision(&[0.1, 0.2], &[false, false]).is_err());
    assert!(auroc(&[0.1], &[true, false]).is_err());
    assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
}

/// Scores equal to the mask plus tiny noise: every metric at the ceiling.
#[test]
fn oracle_scores_reach_ceiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<bool> = (0..5000).map(|_| rng.gen_bool(0.1)).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| l as u8 as f64 + rng.gen_range(-1e-3..1e-3)).collect();
    assert!(auroc(&scores, &labels).unwrap() > 0.99);
    assert!(average_precision(&scores, &labels).unwrap() > 0.99);
}

/// Random scores: AUROC stays within 3 sigma of the null distribution.
#[test]
fn random_scores_stay_in_null_band() {
    let (np, nn) = (50.0f64, 50.0f64);
    let sigma = ((np + nn + 1.0) / (12.0 * np * nn)).sqrt();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..100).map(|i| i < 50).collect();
        let scores: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - 0.5).abs() < 3.0 * sigma, "seed {seed}: {a}");
    }
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=200, 1u32..30).prop_flat_map(|(n, levels)| {
        (
            prop::collection::vec((0..=levels).prop_map(move |k| k as f64 / levels as f64), n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
            0..n - 1,
        )
            .prop_map(|(scores, mut labels, i, j)| {
                labels[i] = true;
                labels[if j >= i { j + 1 } else { j }] = false;
                (scores, labels)
            })
    })
}

proptest! {
    #[test]
    fn auroc_equals_pairwise_oracle((scores, labels) in instance()) {
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), oracle::auroc_pairs(&scores, &labels));
    }

    #[test]
    fn ap_equals_threshold_oracle((scores, labels) in instance()) {
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), oracle::average_precision_thresholds(&scores, &labels));
    }

    #[test]
    fn flipping_scores_mirrors_auroc((scores, labels) in instance()) {
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auroc(&scores, &labels).unwrap();
        let b = auroc(&flipped, &labels).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
