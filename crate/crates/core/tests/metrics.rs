mod common;

use common::{brute_hd95_cm, random_mask};
use ctvseg::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sp = [1.0, 1.0, 3.0];
    for case in 0..200 {
        let density = rng.random_range(0.05..0.7);
        let a = random_mask(&mut rng, [8, 8, 4], density);
        let b = random_mask(&mut rng, [8, 8, 4], density);
        let (na, nb) = (a.count_nonzero(), b.count_nonzero());
        let both = a.data().iter().zip(b.data()).filter(|(x, y)| **x == 1 && **y == 1).count();
        let d = dice(&a, &b).unwrap();
        let j = iou(&a, &b).unwrap();
        assert_eq!(d, 2.0 * both as f64 / (na + nb) as f64, "case {case}");
        assert_eq!(j, both as f64 / (na + nb - both) as f64, "case {case}");
        assert!((j - d / (2.0 - d)).abs() <= 1e-12);
        if na > 0 && nb > 0 {
            let hd = hd95(&a, &b, sp, Hd95Convention::Combined).unwrap();
            assert!((hd.cm - brute_hd95_cm(&a, &b, sp)).abs() < 1e-9, "case {case}: {} vs {}", hd.cm, brute_hd95_cm(&a, &b, sp));
        }
    }
}

#[test]
fn metrics_are_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let a = random_mask(&mut rng, [6, 7, 5], 0.3);
        let b = random_mask(&mut rng, [6, 7, 5], 0.2);
        let sp = [0.8, 1.0, 2.5];
        let ab = hd95(&a, &b, sp, Hd95Convention::Combined).unwrap().cm;
        let ba = hd95(&b, &a, sp, Hd95Convention::Combined).unwrap().cm;
        assert_eq!(ab, ba);
        let dm = |x, y| hd95(x, y, sp, Hd95Convention::DirectedMax).unwrap().cm;
        assert_eq!(dm(&a, &b), dm(&b, &a));
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }
}

#[test]
fn t_test_agrees_with_reference_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2usize, 3, 5, 12, 40] {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.2)).collect();
        let (t, p) = paired_t_test(&x, &y).unwrap();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
        let expected = 2.0 * (1.0 - dist.cdf(t.abs()));
        assert!((p - expected).abs() < 1e-10, "n={n}: {p} vs {expected}");
    }
    let (t, p) = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    assert!((t - 3.0 / (2.5f64.sqrt() / 5f64.sqrt())).abs() < 1e-12);
    assert!((p - 0.013_235_6).abs() < 1e-6);
}

#[test]
fn balanced_binary_bootstrap_brackets_one_half() {
    let v: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
    let ci = bootstrap_ci(&v, 1000, 0.95, 11).unwrap();
    assert_eq!(ci.mean, 0.5);
    assert!(ci.low < 0.5 && ci.high > 0.5);
    assert!((ci.low - 0.40).abs() <= 0.03 && (ci.high - 0.60).abs() <= 0.03, "{ci:?}");
}

proptest! {
    #[test]
    fn hd95_scales_with_spacing(seed in any::<u64>(), k in 0.25f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut rng, [5, 5, 4], 0.4);
        let b = random_mask(&mut rng, [5, 5, 4], 0.4);
        prop_assume!(a.count_nonzero() > 0 && b.count_nonzero() > 0);
        let sp = [1.0, 1.0, 3.0];
        let base = hd95(&a, &b, sp, Hd95Convention::Combined).unwrap().cm;
        let scaled = hd95(&a, &b, sp.map(|s| s * k), Hd95Convention::Combined).unwrap().cm;
        prop_assert!((scaled - k * base).abs() <= 1e-12 * (1.0 + scaled));
    }

    #[test]
    fn interval_contains_mean(values in proptest::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>()) {
        let ci = bootstrap_ci(&values, 200, 0.95, seed).unwrap();
        prop_assert!(ci.low <= ci.mean && ci.mean <= ci.high);
    }
}
