mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uie_dal::autodiff::{AdamConfig, AdamState, Tensor};
use uie_dal::models::{build_model, one_hot, ArchitectureConfig, ModelBundle};
use uie_dal::training::{apply_routed_update, classifier_step, Mode, Optimizers};
use uie_dal::verification::tiny_architecture;

fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn model(arch: &ArchitectureConfig, seed: u64) -> ModelBundle<f64> {
    let mut m = build_model(arch).unwrap();
    m.init(seed);
    m
}

#[test]
fn desk_config_shapes() {
    let arch = ArchitectureConfig::desk(8, 3);
    assert_eq!(arch.latent_shape(), [64, 4, 4]);
    let mut m = model(&arch, 1);
    let x = Tensor::zeros(&[2, 3, 32, 32]);
    let enc = m.encode(&x).unwrap();
    assert_eq!(enc.z.shape(), &[2, 64, 4, 4]);
    assert_eq!(enc.skips.len(), 3);
    for (l, s) in enc.skips.iter().enumerate() {
        assert_eq!(&s.shape()[1..], &arch.skip_shape(l));
    }
    let y = m.decode(&enc).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    let p = m.classify(&enc.z).unwrap();
    assert_eq!(p.shape(), &[2, 6]);
}

#[test]
fn indivisible_input_is_rejected() {
    let mut arch = ArchitectureConfig::desk(4, 3);
    arch.height = 20;
    assert!(matches!(build_model::<f64>(&arch), Err(uie_dal::Error::Config(_))));
}

#[test]
fn wrong_input_size_is_a_shape_error() {
    let mut m = model(&tiny_architecture(), 0);
    let bad = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(matches!(m.encode(&bad), Err(uie_dal::Error::Shape { .. })));
    let z = Tensor::zeros(&[1, 3, 2, 2]);
    assert!(matches!(m.classify(&z), Err(uie_dal::Error::Shape { .. })));
}

#[test]
fn encode_is_deterministic_and_pixel_sensitive() {
    let arch = tiny_architecture();
    let mut m = model(&arch, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let a = m.encode(&x).unwrap();
    let b = m.encode(&x).unwrap();
    assert_eq!(a, b);
    let mut x2 = x.clone();
    x2.data_mut()[3 * 8 + 5] += 0.25;
    let c = m.encode(&x2).unwrap();
    assert_ne!(a.z.data(), c.z.data());
}

#[test]
fn decode_random_latents_in_unit_range() {
    let arch = tiny_architecture();
    let mut m = model(&arch, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[3, 3, 8, 8], 0.0, 1.0);
    let mut enc = m.encode(&x).unwrap();
    enc.z = random_tensor(&mut rng, enc.z.shape(), -20.0, 20.0);
    let y = m.decode(&enc).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn skips_are_consumed() {
    let arch = tiny_architecture();
    let mut m = model(&arch, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let enc = m.encode(&x).unwrap();
    let full = m.decode(&enc).unwrap();
    for l in 0..arch.levels {
        let mut cut = enc.clone();
        cut.skips[l].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let y = m.decode(&cut).unwrap();
        assert_ne!(full.data(), y.data(), "zeroing skip {l} changed nothing");
    }
}

#[test]
fn probabilities_are_distributions() {
    let arch = tiny_architecture();
    let mut m = model(&arch, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random_tensor(&mut rng, &[5, 4, 2, 2], -3.0, 3.0);
    let p = m.classify(&z).unwrap();
    for row in p.data().chunks(6) {
        assert!(row.iter().all(|v| *v > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn untrained_classifier_is_uniform_on_average() {
    let arch = ArchitectureConfig::desk(8, 3);
    let mut mean = [0.0f64; 6];
    for seed in 0..100 {
        let mut m = model(&arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let z = random_tensor(&mut rng, &[1, 64, 4, 4], 0.0, 1.0);
        let p = m.classify(&z).unwrap();
        for (acc, v) in mean.iter_mut().zip(p.data()) {
            *acc += v / 100.0;
        }
    }
    for v in mean {
        assert!((v - 1.0 / 6.0).abs() < 0.03, "{mean:?}");
    }
}

#[test]
fn classifier_learns_separable_latents() {
    let arch = tiny_architecture();
    let mut m = model(&arch, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // each class lights up its own spatial/channel corner plus noise
    let n = 120;
    let classes: Vec<usize> = (0..n).map(|i| i % 6).collect();
    let mut z = random_tensor(&mut rng, &[n, 4, 2, 2], 0.0, 0.3);
    for (i, c) in classes.iter().enumerate() {
        let base = i * 16;
        z.data_mut()[base + (c % 4) * 4 + c / 4] += 2.0;
    }
    let targets = one_hot(&classes, 6);
    let mut state = AdamState::new(m.classifier.params());
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    for _ in 0..300 {
        classifier_step(&mut m.classifier, &mut state, &z, &targets, &adam).unwrap();
    }
    let p = m.classify(&z).unwrap();
    let correct = p
        .data()
        .chunks(6)
        .zip(&classes)
        .filter(|(row, c)| {
            let best = (0..6).max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap()).unwrap();
            best == **c
        })
        .count();
    assert!(correct as f64 / n as f64 > 0.9, "accuracy {correct}/{n}");
}

#[test]
fn reconstruction_loss_falls_on_one_batch() {
    let arch = common::small_arch(16);
    let set = common::toy_set(2, 16, 1);
    let batch = set.batch::<f64>(&(0..8).collect::<Vec<_>>(), 6).unwrap();
    let mut m = model(&arch, 8);
    let mut optim = Optimizers::new(&m);
    let adam = AdamConfig::default();
    let losses: Vec<f64> = (0..50)
        .map(|_| {
            apply_routed_update(&mut m, &mut optim, &batch, Mode::WarmupEg, 0.0, &adam)
                .unwrap()
                .losses
                .l_r
        })
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn same_seed_same_parameters() {
    let arch = tiny_architecture();
    let a = model(&arch, 9);
    let b = model(&arch, 9);
    let c = model(&arch, 10);
    for ((ga, gb), gc) in a.graphs().iter().zip(b.graphs()).zip(c.graphs()) {
        assert_eq!(ga.params(), gb.params());
        assert_ne!(ga.params(), gc.params());
    }
}
