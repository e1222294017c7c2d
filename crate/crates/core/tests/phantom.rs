mod common;

use common::oracle_mask;
use ctvseg::phantom::*;
use proptest::prelude::*;

const SPEC: GridSpec = GridSpec { dims: [24, 24, 12], spacing: [1.0, 1.0, 3.0] };

#[test]
fn mask_matches_independent_ruleset_over_1000_cases() {
    for i in 0..1000 {
        let seed = case_seed(2024, i);
        let r = ClinicalRecord::sample(seed);
        let p = synthesize(&r, seed, &SPEC).unwrap();
        assert_eq!(p.mask.data(), &oracle_mask(&r, &p.labels)[..], "case {i}");
    }
}

#[test]
fn sampled_fields_are_balanced() {
    let n = 10_000;
    let records: Vec<_> = (0..n).map(|i| ClinicalRecord::sample(case_seed(1, i))).collect();
    let frac = |f: &dyn Fn(&ClinicalRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n as f64;
    let left = frac(&|r| r.laterality == Some(Laterality::Left));
    let mast = frac(&|r| r.surgery == Some(Surgery::Mastectomy));
    assert!((left - 0.5).abs() <= 0.02, "left fraction {left}");
    assert!((mast - 0.5).abs() <= 0.02, "mastectomy fraction {mast}");
}

/// Image summaries that move with the anatomy draw: breast size and the centroid
/// of bright tissue along each axis.
fn image_features(g: &Grid<f32>) -> [f64; 4] {
    let (mut n, mut c) = (0.0, [0.0; 3]);
    for (i, &v) in g.data().iter().enumerate() {
        if v > 0.35 {
            n += 1.0;
            let p = g.coords(i);
            (0..3).for_each(|a| c[a] += p[a] as f64);
        }
    }
    [n, c[0] / n, c[1] / n, c[2] / n]
}

fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let ((ma, va, na), (mb, vb, nb)) = (stats(a), stats(b));
    (ma - mb) / (va / na + vb / nb).sqrt()
}

#[test]
fn image_carries_no_record_information() {
    let cases: Vec<_> = (0..2000)
        .map(|i| {
            let seed = case_seed(5, i);
            let r = ClinicalRecord::sample(seed);
            (r, image_features(&synthesize(&r, seed, &SPEC).unwrap().intensity))
        })
        .collect();
    let splits: [(&str, fn(&ClinicalRecord) -> bool); 4] = [
        ("laterality", |r| r.laterality == Some(Laterality::Left)),
        ("surgery", |r| r.surgery == Some(Surgery::Mastectomy)),
        ("n_stage", |r| r.n_stage != Some(NStage::N0)),
        ("t_stage", |r| r.t_stage.unwrap().is_advanced()),
    ];
    for (name, split) in splits {
        for f in 0..4 {
            let (a, b): (Vec<&(ClinicalRecord, [f64; 4])>, Vec<_>) = cases.iter().partition(|(r, _)| split(r));
            let (a, b): (Vec<f64>, Vec<f64>) = (a.iter().map(|c| c.1[f]).collect(), b.iter().map(|c| c.1[f]).collect());
            let t = welch_t(&a, &b);
            assert!(t.abs() < 4.5, "{name} shifts image feature {f}: t = {t}");
        }
    }
}

fn half_stats(g: &Grid<f32>, left: bool) -> (f64, f64) {
    let [_, w, _] = g.dims();
    let vals: Vec<f64> = (0..g.len()).filter(|&i| (g.coords(i)[1] < w / 2) == left).map(|i| g.data()[i] as f64).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn breasts_are_statistically_indistinguishable() {
    // Swapping the halves of a volume must not change what a per-half summary can see.
    let mut mean_diffs = Vec::new();
    for i in 0..200 {
        let seed = case_seed(77, i);
        let p = synthesize(&ClinicalRecord::sample(seed), seed, &SPEC).unwrap();
        let swapped = p.intensity.mirrored();
        let (ml, vl) = half_stats(&p.intensity, true);
        let (mr, vr) = half_stats(&swapped, true);
        let n_half = (p.intensity.len() / 2) as f64;
        assert!((ml - mr).abs() < 6.0 * NOISE_SIGMA / n_half.sqrt(), "case {i}: means {ml} vs {mr}");
        assert!((vl - vr).abs() < 0.05 * vl.max(vr), "case {i}: variances {vl} vs {vr}");
        mean_diffs.push(ml - mr);
    }
    let avg = mean_diffs.iter().sum::<f64>() / mean_diffs.len() as f64;
    let n_half = (SPEC.dims.iter().product::<usize>() / 2) as f64;
    assert!(avg.abs() < 4.0 * NOISE_SIGMA / (n_half * 200.0).sqrt() * 2f64.sqrt(), "mean left-right gap {avg}");
}

#[test]
fn dataset_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 3, 5, &SPEC).unwrap();
    let loaded = Manifest::read(&manifest).unwrap().load().unwrap();
    let generated = generate_cases(3, 5, &SPEC).unwrap();
    assert_eq!(loaded, generated);
}

#[test]
fn missing_manifest_files_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2, 5, &SPEC).unwrap();
    std::fs::remove_file(dir.path().join("case_0001.mask")).unwrap();
    match Manifest::read(&manifest).unwrap().load() {
        Err(ctvseg::Error::Manifest(paths)) => {
            assert_eq!(paths.len(), 1);
            assert!(paths[0].ends_with("case_0001.mask"));
        }
        other => panic!("expected manifest error, got {other:?}"),
    }
}

fn any_field() -> impl Strategy<Value = Field> {
    prop_oneof![Just(Field::Laterality), Just(Field::TStage), Just(Field::NStage), Just(Field::Surgery), Just(Field::Age)]
}

proptest! {
    #[test]
    fn omission_drops_only_that_clause(seed in any::<u64>(), field in any_field()) {
        let r = ClinicalRecord::sample(seed);
        let full = r.render_text(&[]);
        let cut = r.render_text(&[field]);
        prop_assert!(cut.len() < full.len());
        // the shorter text is the full text with one contiguous piece removed
        let prefix = full.chars().zip(cut.chars()).take_while(|(a, b)| a == b).count();
        prop_assert!(full.ends_with(&cut[prefix..]));
        prop_assert_eq!(r.without(field).render_text(&[]), cut);
    }

    #[test]
    fn volume_files_round_trip(dims in (1usize..5, 1usize..5, 1usize..5), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = [dims.0, dims.1, dims.2];
        let n = d.iter().product();
        let g = Grid::from_vec(d, [0.7, 1.1, 3.0], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let v = VolumeData::Intensity(g);
        prop_assert_eq!(VolumeData::decode(&v.encode()).unwrap(), v);
    }
}
