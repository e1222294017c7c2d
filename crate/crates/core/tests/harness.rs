use ctvseg::harness::train::{initial_model, training_cases};
use ctvseg::harness::{evaluate, report_for, sliding_window_logits, train, Checkpoint, ExperimentConfig, LmWeights};
use ctvseg::model::Variant;
use ctvseg::phantom::{generate_cases, Field};
use ctvseg::Error;
use diffcore::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_variant(variant);
    for (k, v) in [
        ("grid", "24x24x12"),
        ("patch", "24x24x12"),
        ("spacing", "2,2,4"),
        ("channels", "4,8"),
        ("align_heads", "2"),
        ("align_blocks", "1"),
        ("lm_dim", "16"),
        ("lm_layers", "1"),
        ("lm_heads", "2"),
        ("lm_steps", "5"),
        ("lm_sentences", "50"),
        ("train_cases", "4"),
        ("test_cases", "3"),
        ("epochs", "1"),
        ("lr", "1e-3"),
    ] {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

fn lm(cfg: &ExperimentConfig) -> LmWeights {
    LmWeights::obtain(cfg).unwrap()
}

#[test]
fn config_renders_and_parses_back() {
    let mut c = tiny(Variant::Multimodal);
    c.set("omit", "laterality,n_stage").unwrap();
    assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
    assert_eq!(ExperimentConfig::parse(&tiny(Variant::NoTuning).render()).unwrap(), tiny(Variant::NoTuning));
}

#[test]
fn config_errors_exit_with_two() {
    for text in ["bogus = 1", "variant = nope", "lr", "grid = 8x8", "train_fraction = 0"] {
        let e = ExperimentConfig::parse(text).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny(Variant::Multimodal);
    let lm = lm(&cfg);
    let cases = training_cases(&cfg).unwrap();
    let out = train::<f32>(&cfg, &cases, Some(&lm)).unwrap();
    let bytes = out.checkpoint.encode();
    let back = Checkpoint::<f32>::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);
    assert_eq!(back.config, cfg);
    assert_eq!(back.step, out.checkpoint.step);

    let case = &cases[0];
    let text = back.model.render(&case.record, &[]);
    let a = sliding_window_logits(&out.checkpoint.model, &case.intensity, &text, cfg.patch).unwrap();
    let b = sliding_window_logits(&back.model, &case.intensity, &text, cfg.patch).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap().encode(), bytes);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let cfg = tiny(Variant::VisionOnly);
    let model = initial_model::<f64>(&cfg, None).unwrap();
    let ck = Checkpoint { config: cfg, model, step: 0, rng: ChaCha8Rng::seed_from_u64(0) };
    let bytes = ck.encode();
    assert_eq!(Checkpoint::<f64>::decode(&bytes).unwrap().encode(), bytes);
    for bad in [&bytes[..bytes.len() - 1], &bytes[..3]] {
        assert!(matches!(Checkpoint::<f64>::decode(bad), Err(Error::Format { .. })));
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::<f64>::decode(&extra), Err(Error::Format { .. })));
    assert!(Checkpoint::<f32>::decode(&bytes).is_err());
}

#[test]
fn zero_epochs_leaves_the_initial_model() {
    let mut cfg = tiny(Variant::VisionOnly);
    cfg.epochs = 0;
    let cases = training_cases(&cfg).unwrap();
    let out = train::<f32>(&cfg, &cases, None).unwrap();
    let init = Checkpoint { config: cfg.clone(), model: initial_model::<f32>(&cfg, None).unwrap(), step: 0, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    assert_eq!(out.checkpoint.encode(), init.encode());
    assert!(out.log.is_empty());
}

#[test]
fn training_is_deterministic_and_leaves_the_language_model_alone() {
    let mut cfg = tiny(Variant::Multimodal);
    cfg.epochs = 2;
    let lm = lm(&cfg);
    let cases = training_cases(&cfg).unwrap();
    let a = train::<f32>(&cfg, &cases, Some(&lm)).unwrap();
    let b = train::<f32>(&cfg, &cases, Some(&lm)).unwrap();
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.step, 4);
    let text = a.checkpoint.model.text.as_ref().unwrap();
    let init = initial_model::<f32>(&cfg, Some(&lm)).unwrap();
    let before = init.text.as_ref().unwrap().lm.snapshot(&init.store);
    let after = text.lm.snapshot(&a.checkpoint.model.store);
    assert!(ctvseg::textenc::assert_frozen(&before, &after));
}

#[test]
fn single_window_equals_one_forward_pass() {
    let cfg = tiny(Variant::Multimodal);
    let lm = lm(&cfg);
    let model = initial_model::<f32>(&cfg, Some(&lm)).unwrap();
    let case = &generate_cases(1, 9, &cfg.grid_spec()).unwrap()[0];
    let text = model.render(&case.record, &[]);
    let tiled = sliding_window_logits(&model, &case.intensity, &text, cfg.patch).unwrap();
    let mut g = Graph::new();
    let p = cfg.patch;
    let x = g.constant(Tensor::new(&[1, 1, p[0], p[1], p[2]], case.intensity.data().to_vec()).unwrap());
    let y = model.forward(&mut g, x, &[text]).unwrap();
    assert!(tiled.data().iter().zip(g.value(y).data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn overlapping_windows_cover_the_volume() {
    let mut cfg = tiny(Variant::VisionOnly);
    cfg.set("grid", "40x24x20").unwrap();
    cfg.set("patch", "24x24x12").unwrap();
    let model = initial_model::<f32>(&cfg, None).unwrap();
    let case = &generate_cases(1, 3, &cfg.grid_spec()).unwrap()[0];
    let logits = sliding_window_logits(&model, &case.intensity, "", cfg.patch).unwrap();
    assert_eq!(logits.dims(), [40, 24, 20]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn volumes_smaller_than_the_patch_are_rejected() {
    let cfg = tiny(Variant::VisionOnly);
    let model = initial_model::<f32>(&cfg, None).unwrap();
    let case = &generate_cases(1, 3, &cfg.grid_spec()).unwrap()[0];
    let small = case.intensity.crop([0, 0, 0], [16, 24, 12]);
    assert!(matches!(sliding_window_logits(&model, &small, "", cfg.patch), Err(Error::Contract(_))));
}

#[test]
fn report_is_independent_of_case_order_and_perfect_on_truth() {
    let cfg = tiny(Variant::VisionOnly);
    let cases = generate_cases(5, 4, &cfg.grid_spec()).unwrap();
    let truth: Vec<_> = cases.iter().map(|c| c.mask.clone()).collect();
    let r = report_for(&cases, &truth, 0).unwrap();
    assert_eq!(r.dice.mean, 1.0);
    assert_eq!(r.iou.mean, 1.0);

    let model = initial_model::<f32>(&cfg, None).unwrap();
    let a = evaluate(&model, &cases, &[], cfg.patch, 7).unwrap();
    let mut rev = cases.clone();
    rev.reverse();
    let b = evaluate(&model, &rev, &[], cfg.patch, 7).unwrap();
    assert_eq!(a.render(), b.render());
    let c = evaluate(&model, &cases, &[Field::Laterality], cfg.patch, 7).unwrap();
    assert_eq!(a.render(), c.render(), "vision-only ignores the record");
}
