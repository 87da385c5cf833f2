mod common;

use proptest::prelude::*;
use uie_dal::autodiff::AdamConfig;
use uie_dal::datastore::encode_checkpoint;
use uie_dal::models::{build_model, names, ModelBundle};
use uie_dal::training::{
    apply_routed_update, decide_epoch_mode, Batch, Mode, Optimizers, SampleSet, TrainConfig, TrainData, Trainer,
};

const LN6: f64 = 1.791_759_469_228_055;

fn bundle(seed: u64) -> ModelBundle<f64> {
    let mut m = build_model(&common::small_arch(16)).unwrap();
    m.init(seed);
    m
}

fn batch(set: &SampleSet, start: usize, n: usize) -> Batch<f64> {
    let idx: Vec<usize> = (start..start + n).map(|i| i % set.len()).collect();
    set.batch(&idx, 6).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        eval_batch_size: 16,
        max_warmup_epochs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn train_d_leaves_encoder_and_decoder_gradients_zero() {
    let set = common::toy_set(2, 16, 0);
    let mut m = bundle(1);
    let mut opt = Optimizers::new(&m);
    let before = (m.encoder.params().clone(), m.decoder.params().clone());
    let r = apply_routed_update(
        &mut m,
        &mut opt,
        &batch(&set, 0, 6),
        Mode::TrainD,
        1.0,
        &AdamConfig::default(),
    )
    .unwrap();
    assert_eq!(r.grads.encoder, 0.0);
    assert_eq!(r.grads.decoder, 0.0);
    assert!(r.grads.classifier > 0.0);
    assert_eq!(&before.0, m.encoder.params());
    assert_eq!(&before.1, m.decoder.params());
}

#[test]
fn adversarial_step_leaves_classifier_gradients_zero() {
    let set = common::toy_set(2, 16, 0);
    let mut m = bundle(2);
    let mut opt = Optimizers::new(&m);
    let d_before = m.classifier.params().clone();
    for mode in [Mode::AdvEg, Mode::WarmupEg] {
        let r = apply_routed_update(&mut m, &mut opt, &batch(&set, 0, 6), mode, 1.0, &AdamConfig::default()).unwrap();
        assert_eq!(r.grads.classifier, 0.0, "{mode}");
        assert!(r.grads.encoder > 0.0 && r.grads.decoder > 0.0, "{mode}");
    }
    assert_eq!(&d_before, m.classifier.params());
}

#[test]
fn zero_lambda_adversarial_step_is_a_pure_reconstruction_step() {
    let set = common::toy_set(2, 16, 0);
    let b = batch(&set, 3, 6);
    let adam = AdamConfig::default();
    let mut a = bundle(3);
    let mut c = a.clone();
    let (mut oa, mut oc) = (Optimizers::new(&a), Optimizers::new(&c));
    for _ in 0..3 {
        apply_routed_update(&mut a, &mut oa, &b, Mode::AdvEg, 0.0, &adam).unwrap();
        apply_routed_update(&mut c, &mut oc, &b, Mode::WarmupEg, 0.0, &adam).unwrap();
    }
    assert_eq!(a.encoder.params(), c.encoder.params());
    assert_eq!(a.decoder.params(), c.decoder.params());
    assert_eq!(oa.encoder, oc.encoder);
}

#[test]
fn zero_lambda_run_matches_classifier_free_run() {
    let data = common::toy_data(3, 1, 16, 4);
    let cfg = TrainConfig {
        lambda_adv: 0.0,
        ..small_config(3)
    };
    let arch = common::small_arch(16);
    let mut with_d = Trainer::<f32>::new(&arch, cfg.clone()).unwrap();
    let mut without = Trainer::<f32>::new(&arch, cfg).unwrap().classifier_free().unwrap();
    with_d.run_training(&data, |_| Ok(())).unwrap();
    without.run_training(&data, |_| Ok(())).unwrap();
    assert_eq!(with_d.bundle.encoder.params(), without.bundle.encoder.params());
    assert_eq!(with_d.bundle.decoder.params(), without.bundle.decoder.params());
    for (x, y) in with_d.state.log.iter().zip(&without.state.log) {
        assert_eq!(x.val_g.to_bits(), y.val_g.to_bits());
        assert_eq!(x.l_r.to_bits(), y.l_r.to_bits());
    }
    // the passenger classifier did learn something
    assert_ne!(with_d.state.optim.classifier.step, 0);
    assert_eq!(without.state.optim.classifier.step, 0);
}

#[test]
fn classifier_free_needs_zero_lambda() {
    let t = Trainer::<f32>::new(&common::small_arch(16), small_config(1)).unwrap();
    assert!(matches!(t.classifier_free(), Err(uie_dal::Error::Config(_))));
}

#[test]
fn adversarial_loss_stays_in_bounds_and_equals_negative_entropy() {
    let set = common::toy_set(4, 16, 5);
    let mut m = bundle(5);
    let mut opt = Optimizers::new(&m);
    let adam = AdamConfig {
        lr: 5e-3,
        ..AdamConfig::default()
    };
    for step in 0..200 {
        // alternate blocks so both D and E move
        let mode = if (step / 10) % 2 == 0 {
            Mode::TrainD
        } else {
            Mode::AdvEg
        };
        let r = apply_routed_update(&mut m, &mut opt, &batch(&set, step * 4, 4), mode, 1.0, &adam).unwrap();
        let la = r.losses.l_a;
        assert!((-LN6 - 1e-12..=0.0).contains(&la), "step {step}: L_A {la}");
        let probs = m.classifier.output(names::PROBS).unwrap();
        let entropy: f64 = probs
            .data()
            .chunks(6)
            .map(|row| -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert!((entropy + la).abs() < 1e-12, "step {step}: H {entropy} vs L_A {la}");
        assert!(r.losses.l_n >= 0.0);
    }
}

#[test]
fn non_finite_loss_aborts_the_step() {
    let set = common::toy_set(1, 16, 6);
    let mut b = batch(&set, 0, 2);
    b.degraded.data_mut()[7] = f64::NAN;
    let mut m = bundle(6);
    let snapshot = m.clone();
    let mut opt = Optimizers::new(&m);
    for mode in [Mode::WarmupEg, Mode::AdvEg, Mode::TrainD] {
        let r = apply_routed_update(&mut m, &mut opt, &b, mode, 1.0, &AdamConfig::default());
        assert!(matches!(r, Err(uie_dal::Error::Numeric(_))), "{mode}: {r:?}");
    }
    for (g, s) in m.graphs().iter().zip(snapshot.graphs()) {
        assert_eq!(g.params(), s.params());
    }
}

#[test]
fn zero_threshold_skips_warmup() {
    let data = common::toy_data(2, 1, 16, 7);
    let cfg = TrainConfig {
        threshold_g: 0.0,
        ..small_config(1)
    };
    let mut t = Trainer::<f32>::new(&common::small_arch(16), cfg).unwrap();
    let enc = t.bundle.encoder.params().clone();
    let w = t.run_warmup(&data).unwrap();
    assert_eq!(w.epochs, 0);
    assert!(!w.guard_tripped);
    assert_eq!(&enc, t.bundle.encoder.params());
}

#[test]
fn warmup_never_touches_the_classifier() {
    let data = common::toy_data(2, 1, 16, 8);
    let mut t = Trainer::<f32>::new(&common::small_arch(16), small_config(1)).unwrap();
    let d = t.bundle.classifier.params().clone();
    let w = t.run_warmup(&data).unwrap();
    assert_eq!(w.epochs, 2);
    assert!(w.guard_tripped);
    assert_eq!(&d, t.bundle.classifier.params());
    assert_eq!(t.state.optim.classifier.step, 0);
}

#[test]
fn ten_image_set_is_memorized_within_500_epochs() {
    let samples: Vec<_> = common::toy_samples(2, 16, 9).into_iter().take(10).collect();
    let set = SampleSet::new(16, 16, samples).unwrap();
    let data = TrainData {
        train: set.clone(),
        val: set,
    };
    let cfg = TrainConfig {
        batch_size: 2,
        max_warmup_epochs: 500,
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::new(&common::small_arch(16), cfg).unwrap();
    let w = t.run_warmup(&data).unwrap();
    assert!(!w.guard_tripped, "{w:?}");
    assert!(w.val_g >= 0.9 && w.epochs <= 500, "{w:?}");
}

#[test]
fn main_loop_requires_warmup() {
    let data = common::toy_data(2, 1, 16, 10);
    let mut t = Trainer::<f32>::new(&common::small_arch(16), small_config(1)).unwrap();
    assert!(matches!(t.run_epoch(&data), Err(uie_dal::Error::State(_))));
}

#[test]
fn log_has_one_complete_entry_per_epoch() {
    let data = common::toy_data(2, 1, 16, 11);
    let cfg = TrainConfig {
        threshold_g: 0.0,
        ..small_config(4)
    };
    let mut t = Trainer::<f32>::new(&common::small_arch(16), cfg).unwrap();
    let mut seen = Vec::new();
    t.run_training(&data, |t| {
        seen.push(t.state.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert_eq!(t.state.log.len(), 4);
    for (i, e) in t.state.log.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert!(e.val_g.is_finite() && e.val_d.is_finite());
        // val_D starts at chance and 0 threshold sends epoch 0 to TRAIN_D
        if e.mode == Mode::TrainD {
            assert!(e.l_n.is_finite() && e.l_a.is_finite());
        } else {
            assert!(e.l_r.is_finite() && e.l_a.is_finite());
        }
    }
    assert_eq!(t.state.log[0].mode, Mode::TrainD);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = common::toy_data(2, 1, 16, 12);
    let run = |seed: u64| {
        let cfg = TrainConfig {
            threshold_g: 0.5,
            seed,
            ..small_config(3)
        };
        let mut t = Trainer::<f32>::new(&common::small_arch(16), cfg).unwrap();
        t.run_training(&data, |_| Ok(())).unwrap();
        encode_checkpoint(&t).unwrap()
    };
    let a = run(21);
    assert_eq!(a, run(21));
    assert_ne!(a, run(22));
}

fn oracle(g: f64, d: f64, tg: f64, td: f64) -> Mode {
    if !(g < tg) && d < td {
        Mode::TrainD
    } else {
        Mode::AdvEg
    }
}

proptest! {
    #[test]
    fn branch_table_matches_the_gate(
        g in 0.0..=1.0f64,
        d in 0.0..=1.0f64,
        tg in 0.0..=1.0f64,
        td in 0.0..=1.0f64,
        tie in 0u8..4,
    ) {
        // force exact ties on a quarter of the cases each
        let (g, d) = match tie {
            1 => (tg, d),
            2 => (g, td),
            3 => (tg, td),
            _ => (g, d),
        };
        let cfg = TrainConfig { threshold_g: tg, threshold_d: td, ..TrainConfig::default() };
        let e = decide_epoch_mode(g, d, &cfg);
        prop_assert_eq!(e.mode, oracle(g, d, tg, td));
        prop_assert_eq!(e.val_g, g);
        prop_assert_eq!(e.val_d, d);
    }
}

#[test]
fn branch_table_examples_and_ties() {
    let c = TrainConfig::default();
    let cases = [
        (0.85, 0.99, Mode::AdvEg),
        (0.95, 0.80, Mode::TrainD),
        (0.95, 0.90, Mode::AdvEg),
        (0.9, 0.80, Mode::TrainD),
        (0.9, 0.85, Mode::AdvEg),
        (0.95, 0.85, Mode::AdvEg),
        (0.899_999_999, 0.0, Mode::AdvEg),
    ];
    for (g, d, want) in cases {
        assert_eq!(decide_epoch_mode(g, d, &c).mode, want, "({g}, {d})");
    }
}
