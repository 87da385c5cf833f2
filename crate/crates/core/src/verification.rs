//! The gradient-verification suite: every op kind in isolation, the composed
//! encoder-decoder-classifier with all three losses, and negative controls
//! that must fail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::entry;
use crate::autodiff::{gradient_check, init_params, GradCheckConfig, GradCheckReport, Graph, Tensor, ValueId};
use crate::error::Result;
use crate::models::{build_model, names, one_hot, ArchitectureConfig, ModelBundle};

/// Weights of L_R, L_N and L_A in the composite objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub nuisance: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            nuisance: 1.0,
            adversarial: 1.0,
        }
    }
}

/// Inputs of a composite check.
#[derive(Debug, Clone)]
pub struct CompositeBatch {
    pub images: Tensor<f64>,
    pub clear: Tensor<f64>,
    pub targets: Tensor<f64>,
}

fn composite_forward(m: &mut ModelBundle<f64>, b: &CompositeBatch, w: &LossWeights) -> Result<(f64, [Option<u64>; 3])> {
    let enc = m.encode(&b.images)?;
    m.decode_with_target(&enc, &b.clear)?;
    m.classify_with_target(&enc.z, &b.targets)?;
    let j = w.reconstruction * m.decoder.scalar_output(names::RECONSTRUCTION)?
        + w.nuisance * m.classifier.scalar_output(names::NUISANCE)?
        + w.adversarial * m.classifier.scalar_output(names::ADVERSARIAL)?;
    Ok((
        j,
        [
            m.encoder.branch_fingerprint(),
            m.decoder.branch_fingerprint(),
            m.classifier.branch_fingerprint(),
        ],
    ))
}

/// Central-difference check of `w_r L_R + w_n L_N + w_a L_A` through E, G
/// and D jointly: every parameter of all three networks plus the input image.
pub fn composite_gradient_check(
    m: &mut ModelBundle<f64>,
    batch: &CompositeBatch,
    weights: &LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    for g in m.graphs_mut() {
        g.set_track_branches(true);
        g.params_mut().zero_grad();
    }
    let (_, base) = composite_forward(m, batch, weights)?;

    let d = &mut m.classifier;
    let seeds_d = [
        (d.output_id(names::NUISANCE)?, vec![weights.nuisance]),
        (d.output_id(names::ADVERSARIAL)?, vec![weights.adversarial]),
    ];
    let refs: Vec<(ValueId, &[f64])> = seeds_d.iter().map(|(v, s)| (*v, s.as_slice())).collect();
    let dz_d = d.backward(&refs)?.swap_remove(0);
    let lr = m.decoder.output_id(names::RECONSTRUCTION)?;
    let g_in = m.decoder.backward(&[(lr, &[weights.reconstruction])])?;
    let mut seeds = Vec::new();
    let mut dz = g_in[0].as_ref().map(|t| t.data().to_vec()).unwrap_or_default();
    if let Some(t) = dz_d {
        dz.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
    }
    seeds.push((m.encoder.output_id(names::Z)?, dz));
    for l in 0..m.config.levels {
        if let Some(t) = &g_in[1 + l] {
            seeds.push((m.encoder.output_id(&names::skip(l))?, t.data().to_vec()));
        }
    }
    let refs: Vec<(ValueId, &[f64])> = seeds.iter().map(|(v, s)| (*v, s.as_slice())).collect();
    let dx = m.encoder.backward(&refs)?.swap_remove(0);

    let mut entries = Vec::new();
    let mut skipped = 0;
    let eps = cfg.eps;
    let central = |m: &mut ModelBundle<f64>,
                   b: &mut CompositeBatch,
                   bump: &dyn Fn(&mut ModelBundle<f64>, &mut CompositeBatch, f64)|
     -> Result<Option<f64>> {
        let mut v = [0.0; 2];
        let mut changed = false;
        for (slot, s) in [(0, 1.0), (1, -1.0)] {
            bump(m, b, s * eps);
            let (j, fp) = composite_forward(m, b, weights)?;
            bump(m, b, -s * eps);
            v[slot] = j;
            changed |= fp != base;
        }
        Ok((!changed).then(|| (v[0] - v[1]) / (2.0 * eps)))
    };

    let mut work = batch.clone();
    for gi in 0..3 {
        for pi in 0..m.graphs()[gi].params().len() {
            let p = m.graphs()[gi].params().at(pi);
            let name = p.name.clone();
            let analytic = p
                .tensor
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            for (idx, a) in analytic.iter().enumerate() {
                let bump = |m: &mut ModelBundle<f64>, _: &mut CompositeBatch, delta: f64| {
                    m.graphs_mut()[gi].params_mut().at_mut(pi).tensor.data_mut()[idx] += delta;
                };
                match central(m, &mut work, &bump)? {
                    Some(n) => entries.push(entry(&name, idx, *a, n, cfg.abs_floor)),
                    None => skipped += 1,
                }
            }
        }
    }
    if cfg.check_inputs {
        let analytic = dx
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; batch.images.len()]);
        for (idx, a) in analytic.iter().enumerate() {
            let bump = |_: &mut ModelBundle<f64>, b: &mut CompositeBatch, delta: f64| {
                b.images.data_mut()[idx] += delta;
            };
            match central(m, &mut work, &bump)? {
                Some(n) => entries.push(entry("image", idx, *a, n, cfg.abs_floor)),
                None => skipped += 1,
            }
        }
    }
    for g in m.graphs_mut() {
        g.set_track_branches(false);
    }
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = entries.first().map_or(0.0, |e| e.rel_err);
    let checked = entries.len();
    entries.truncate(cfg.keep_worst);
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        skipped_branch_changes: skipped,
        worst: entries,
        tolerance: cfg.tolerance,
    })
}

/// The tiny U-Net used by the composite check: 8x8 inputs, two levels.
pub fn tiny_architecture() -> ArchitectureConfig {
    ArchitectureConfig {
        height: 8,
        width: 8,
        base_channels: 2,
        levels: 2,
        latent_channels: 4,
        classifier_widths: vec![4, 4],
        num_classes: 6,
        leaky_slope: 0.2,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape and length agree")
}

/// Random weights with nonzero biases so every parameter is exercised.
fn randomize(g: &mut Graph<f64>, seed: u64) {
    init_params(g.params_mut(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in g.params_mut().iter_mut() {
        if p.name.ends_with(".bias") {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
}

/// Tiny bundle with randomized parameters and a matching batch of two.
pub fn tiny_composite(seed: u64) -> Result<(ModelBundle<f64>, CompositeBatch)> {
    let arch = tiny_architecture();
    let mut m = build_model::<f64>(&arch)?;
    for (i, g) in m.graphs_mut().into_iter().enumerate() {
        randomize(g, seed + i as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = CompositeBatch {
        images: random(&mut rng, &[2, 3, 8, 8], 0.0, 1.0),
        clear: random(&mut rng, &[2, 3, 8, 8], 0.0, 1.0),
        targets: one_hot(&[1, 4], arch.num_classes),
    };
    Ok((m, batch))
}

/// One named case of the suite.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    /// Op tags covered by the case.
    pub ops: Vec<&'static str>,
    pub report: GradCheckReport,
    /// Negative controls must fail.
    pub expect_pass: bool,
}

impl SuiteCase {
    pub fn ok(&self) -> bool {
        self.report.passed() == self.expect_pass
    }
}

fn op_case(
    name: &str,
    build: impl FnOnce(&mut Graph<f64>) -> Result<ValueId>,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<SuiteCase> {
    let mut g = Graph::new(name);
    let out = build(&mut g)?;
    randomize(&mut g, seed);
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    g.forward(&refs)?;
    let n = g.value_data(out)?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc07);
    let cot: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = gradient_check(&mut g, &inputs, out, Some(&cot), cfg)?;
    let mut ops: Vec<&'static str> = g.op_kinds().iter().map(|k| k.tag()).collect();
    ops.dedup();
    Ok(SuiteCase {
        name: name.to_string(),
        ops,
        report,
        expect_pass: true,
    })
}

/// Isolated checks for every op kind.
pub fn op_cases(cfg: &GradCheckConfig) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = &mut rng;
    let mut out = Vec::new();
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
        let x = random(r, &[2, 2, 5, 5], -1.0, 1.0);
        out.push(op_case(
            &format!("conv2d k{k} s{s} p{p}"),
            |g| {
                let x = g.input("x", &[2, 5, 5]);
                g.conv2d("c", x, 3, k, s, p)
            },
            vec![x],
            1,
            cfg,
        )?);
    }
    for slope in [0.2, 0.0] {
        let x = random(r, &[2, 3, 4, 4], -1.0, 1.0);
        out.push(op_case(
            &format!("leaky_relu slope {slope}"),
            |g| {
                let x = g.input("x", &[3, 4, 4]);
                g.leaky_relu("a", x, slope)
            },
            vec![x],
            2,
            cfg,
        )?);
    }
    let x = random(r, &[2, 2, 4, 6], -1.0, 1.0);
    out.push(op_case(
        "max_pool2d",
        |g| {
            let x = g.input("x", &[2, 4, 6]);
            g.max_pool2d("p", x)
        },
        vec![x],
        3,
        cfg,
    )?);
    let x = random(r, &[2, 2, 3, 2], -1.0, 1.0);
    out.push(op_case(
        "upsample_nearest",
        |g| {
            let x = g.input("x", &[2, 3, 2]);
            g.upsample_nearest("u", x)
        },
        vec![x],
        4,
        cfg,
    )?);
    let (a, b) = (random(r, &[2, 2, 3, 3], -1.0, 1.0), random(r, &[2, 1, 3, 3], -1.0, 1.0));
    out.push(op_case(
        "concat_channels",
        |g| {
            let a = g.input("a", &[2, 3, 3]);
            let b = g.input("b", &[1, 3, 3]);
            g.concat_channels("c", &[a, b])
        },
        vec![a, b],
        5,
        cfg,
    )?);
    let x = random(r, &[3, 7], -1.0, 1.0);
    out.push(op_case(
        "linear",
        |g| {
            let x = g.input("x", &[7]);
            g.linear("l", x, 4)
        },
        vec![x],
        6,
        cfg,
    )?);
    let x = random(r, &[3, 6], -2.0, 2.0);
    out.push(op_case(
        "softmax",
        |g| {
            let x = g.input("x", &[6]);
            g.softmax("s", x)
        },
        vec![x],
        7,
        cfg,
    )?);
    let x = random(r, &[2, 2, 3, 3], -3.0, 3.0);
    out.push(op_case(
        "sigmoid",
        |g| {
            let x = g.input("x", &[2, 3, 3]);
            g.sigmoid("s", x)
        },
        vec![x],
        8,
        cfg,
    )?);
    let x = random(r, &[2, 3, 4, 2], -1.0, 1.0);
    out.push(op_case(
        "global_avg_pool",
        |g| {
            let x = g.input("x", &[3, 4, 2]);
            g.global_avg_pool("g", x)
        },
        vec![x],
        9,
        cfg,
    )?);
    let (p, t) = (random(r, &[2, 3, 4, 4], 0.0, 1.0), random(r, &[2, 3, 4, 4], 0.0, 1.0));
    out.push(op_case(
        "mse_reduce",
        |g| {
            let p = g.input("p", &[3, 4, 4]);
            let t = g.input("t", &[3, 4, 4]);
            g.mse("l", p, t)
        },
        vec![p, t],
        10,
        cfg,
    )?);
    let z = random(r, &[3, 6], -2.0, 2.0);
    out.push(op_case(
        "cross_entropy_reduce via softmax",
        |g| {
            let z = g.input("z", &[6]);
            let y = g.input("y", &[6]);
            let p = g.softmax("p", z)?;
            g.cross_entropy("l", p, y, 1e-12)
        },
        vec![z, one_hot(&[2, 0, 5], 6)],
        11,
        cfg,
    )?);
    let (p, y) = (random(r, &[2, 4], 0.1, 0.9), random(r, &[2, 4], 0.0, 1.0));
    out.push(op_case(
        "cross_entropy_reduce direct",
        |g| {
            let p = g.input("p", &[4]);
            let y = g.input("y", &[4]);
            g.cross_entropy("l", p, y, 1e-12)
        },
        vec![p, y],
        12,
        cfg,
    )?);
    let z = random(r, &[4, 6], -2.0, 2.0);
    out.push(op_case(
        "neg_entropy_reduce via softmax",
        |g| {
            let z = g.input("z", &[6]);
            let p = g.softmax("p", z)?;
            g.neg_entropy("l", p)
        },
        vec![z],
        13,
        cfg,
    )?);
    let p = random(r, &[2, 5], 0.05, 0.9);
    out.push(op_case(
        "neg_entropy_reduce direct",
        |g| {
            let p = g.input("p", &[5]);
            g.neg_entropy("l", p)
        },
        vec![p],
        14,
        cfg,
    )?);
    Ok(out)
}

/// Composite check of the tiny U-Net with L_R + L_N + L_A.
pub fn composite_case(cfg: &GradCheckConfig) -> Result<SuiteCase> {
    let (mut m, batch) = tiny_composite(21)?;
    let report = composite_gradient_check(&mut m, &batch, &LossWeights::default(), cfg)?;
    let mut ops: Vec<&'static str> = m
        .graphs()
        .iter()
        .flat_map(|g| g.op_kinds().into_iter().map(|k| k.tag()).collect::<Vec<_>>())
        .collect();
    ops.sort_unstable();
    ops.dedup();
    Ok(SuiteCase {
        name: "tiny U-Net + L_R + L_N + L_A".into(),
        ops,
        report,
        expect_pass: true,
    })
}

/// The composite check with the decoder's head gradient negated; must fail.
pub fn negative_control(cfg: &GradCheckConfig) -> Result<SuiteCase> {
    let (mut m, batch) = tiny_composite(22)?;
    m.decoder.inject_sign_flip("head.conv")?;
    let report = composite_gradient_check(&mut m, &batch, &LossWeights::default(), cfg)?;
    Ok(SuiteCase {
        name: "negative control: sign-flipped decoder head".into(),
        ops: vec![],
        report,
        expect_pass: false,
    })
}

/// Everything the `gradcheck` command runs.
pub fn gradient_suite(cfg: &GradCheckConfig) -> Result<Vec<SuiteCase>> {
    let mut cases = op_cases(cfg)?;
    cases.push(composite_case(cfg)?);
    cases.push(negative_control(cfg)?);
    Ok(cases)
}
