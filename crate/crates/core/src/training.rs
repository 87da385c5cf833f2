//! Losses, gradient routing between E/G/D and the threshold-gated epoch loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::formation::derive_seed;
use crate::image::Image;
use crate::metrics;
use crate::models::{build_model, names, one_hot, ArchitectureConfig, ModelBundle, PROB_FLOOR};
use crate::scalar::Scalar;

const DIST_TOL: f64 = 1e-6;

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numeric(format!("not a probability vector: {probs:?}")));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::Numeric(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn loss_reconstruction(output: &[f64], target: &[f64]) -> Result<f64> {
    if output.len() != target.len() {
        return Err(Error::shape(
            "loss_reconstruction",
            format!("{} vs {} elements", output.len(), target.len()),
        ));
    }
    if output.is_empty() {
        return Ok(0.0);
    }
    let sq: Vec<f64> = output.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(metrics::mean(&sq))
}

/// `-ln max(p[class], 1e-12)`.
pub fn loss_nuisance(probs: &[f64], class_id: usize) -> Result<f64> {
    check_distribution(probs)?;
    let p = probs
        .get(class_id)
        .ok_or_else(|| Error::InvalidInput(format!("class {class_id} outside {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `sum p ln p` with `0 ln 0 = 0`; lies in `[-ln M, 0]`.
pub fn loss_adversarial(probs: &[f64]) -> Result<f64> {
    check_distribution(probs)?;
    Ok(probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    WarmupEg,
    AdvEg,
    TrainD,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::WarmupEg => "WARMUP_EG",
            Mode::AdvEg => "ADV_EG",
            Mode::TrainD => "TRAIN_D",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_r: f64,
    pub l_n: f64,
    pub l_a: f64,
}

impl LossValues {
    fn check(&self) -> Result<()> {
        for (name, v) in [("L_R", self.l_r), ("L_N", self.l_n), ("L_A", self.l_a)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} is {v}; step aborted")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub threshold_g: f64,
    pub threshold_d: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_adv: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_warmup_epochs: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Batch size used for validation passes; does not affect training.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            threshold_g: 0.9,
            threshold_d: 0.85,
            epochs: 200,
            batch_size: 16,
            lambda_adv: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            max_warmup_epochs: 1000,
            checkpoint_every: 10,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("threshold_g", self.threshold_g), ("threshold_d", self.threshold_d)] {
            // A zero threshold is allowed: it makes the gate vacuous.
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} = {t} outside [0, 1]")));
            }
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!("lambda_adv = {} must be >= 0", self.lambda_adv)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn adversarial(&self) -> bool {
        self.lambda_adv > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochDecision {
    pub mode: Mode,
    pub val_g: f64,
    pub val_d: f64,
}

/// Algorithm 1's per-epoch branch. Both comparisons are strict, so a score
/// equal to its threshold counts as reached.
pub fn decide_epoch_mode(val_g: f64, val_d: f64, config: &TrainConfig) -> EpochDecision {
    let mode = if val_g < config.threshold_g {
        Mode::AdvEg
    } else if val_d < config.threshold_d {
        Mode::TrainD
    } else {
        Mode::AdvEg
    };
    EpochDecision { mode, val_g, val_d }
}

// ---- data ---------------------------------------------------------------

/// One training example held in planar `[3, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub degraded: Vec<f32>,
    pub clear: Vec<f32>,
    pub class_id: usize,
    pub scene_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<LabeledSample>,
}

/// A stacked mini-batch ready for the graphs.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub degraded: Tensor<T>,
    pub clear: Tensor<T>,
    pub targets: Tensor<T>,
    pub class_ids: Vec<usize>,
}

impl SampleSet {
    pub fn new(height: usize, width: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        let n = 3 * height * width;
        for (i, s) in samples.iter().enumerate() {
            if s.degraded.len() != n || s.clear.len() != n {
                return Err(Error::shape(
                    format!("sample {i}"),
                    format!("expected {n} values per image"),
                ));
            }
        }
        Ok(Self { height, width, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize], num_classes: usize) -> Result<Batch<T>> {
        let shape = [indices.len(), 3, self.height, self.width];
        let mut deg = Vec::with_capacity(shape.iter().product());
        let mut clr = Vec::with_capacity(deg.capacity());
        let mut classes = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            if s.class_id >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has class {} but the model has {num_classes}",
                    s.class_id
                )));
            }
            deg.extend(s.degraded.iter().map(|v| T::lit(*v as f64)));
            clr.extend(s.clear.iter().map(|v| T::lit(*v as f64)));
            classes.push(s.class_id);
        }
        Ok(Batch {
            degraded: Tensor::new(&shape, deg)?,
            clear: Tensor::new(&shape, clr)?,
            targets: one_hot(&classes, num_classes),
            class_ids: classes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: SampleSet,
    pub val: SampleSet,
}

// ---- routed updates -----------------------------------------------------

/// Adam moments for each network.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers<T> {
    pub encoder: AdamState<T>,
    pub decoder: AdamState<T>,
    pub classifier: AdamState<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(bundle: &ModelBundle<T>) -> Self {
        Self {
            encoder: AdamState::new(bundle.encoder.params()),
            decoder: AdamState::new(bundle.decoder.params()),
            classifier: AdamState::new(bundle.classifier.params()),
        }
    }
}

/// Largest absolute parameter gradient per network after a step, for
/// asserting the routing contract.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradAudit {
    pub encoder: f64,
    pub decoder: f64,
    pub classifier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossValues,
    pub grads: GradAudit,
    /// Correct classifier predictions in the batch.
    pub correct: usize,
}

fn scalar_of<T: Scalar>(g: &Graph<T>, name: &str) -> Result<f64> {
    Ok(g.scalar_output(name)?.as_f64())
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Scalar>(probs: &Tensor<T>, classes: &[usize]) -> usize {
    let m = probs.shape()[1];
    probs
        .data()
        .chunks(m)
        .zip(classes)
        .filter(|(row, c)| argmax(row) == **c)
        .count()
}

fn seed_outputs<T: Scalar>(
    g: &Graph<T>,
    levels: usize,
    grads: &[Option<Tensor<T>>],
) -> Result<Vec<(crate::autodiff::ValueId, Vec<T>)>> {
    // Decoder input order: z, skip0..skip{L-1}, target.
    let mut seeds = Vec::with_capacity(levels + 1);
    let z = g.output_id(names::Z)?;
    if let Some(t) = &grads[0] {
        seeds.push((z, t.data().to_vec()));
    }
    for l in 0..levels {
        if let Some(t) = &grads[1 + l] {
            seeds.push((g.output_id(&names::skip(l))?, t.data().to_vec()));
        }
    }
    Ok(seeds)
}

fn audit<T: Scalar>(bundle: &ModelBundle<T>) -> GradAudit {
    GradAudit {
        encoder: bundle.encoder.params().max_abs_grad().as_f64(),
        decoder: bundle.decoder.params().max_abs_grad().as_f64(),
        classifier: bundle.classifier.params().max_abs_grad().as_f64(),
    }
}

/// One optimisation step on `batch` under `mode`.
///
/// * `WarmupEg`: E and G descend L_R; D is not evaluated.
/// * `AdvEg`: G descends L_R, E descends L_R + lambda * L_A; D runs forward
///   only. With `lambda == 0` D's backward is skipped entirely so the update
///   is bitwise a pure L_R step.
/// * `TrainD`: D descends L_N on Z treated as a constant; E and G run
///   forward only.
///
/// All losses are checked for finiteness before any parameter moves.
pub fn apply_routed_update<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    optim: &mut Optimizers<T>,
    batch: &Batch<T>,
    mode: Mode,
    lambda_adv: f64,
    adam: &AdamConfig,
) -> Result<StepReport> {
    for g in bundle.graphs_mut() {
        g.params_mut().zero_grad();
    }
    let enc = bundle.encode(&batch.degraded)?;
    bundle.decode_with_target(&enc, &batch.clear)?;
    let l_r = scalar_of(&bundle.decoder, names::RECONSTRUCTION)?;

    let (l_n, l_a, correct) = if mode == Mode::WarmupEg {
        (f64::NAN, f64::NAN, 0)
    } else {
        let probs = bundle.classify_with_target(&enc.z, &batch.targets)?;
        (
            scalar_of(&bundle.classifier, names::NUISANCE)?,
            scalar_of(&bundle.classifier, names::ADVERSARIAL)?,
            count_correct(&probs, &batch.class_ids),
        )
    };
    let losses = LossValues { l_r, l_n, l_a };
    match mode {
        Mode::WarmupEg => LossValues {
            l_n: 0.0,
            l_a: 0.0,
            ..losses
        }
        .check()?,
        _ => losses.check()?,
    }

    match mode {
        Mode::WarmupEg | Mode::AdvEg => {
            let levels = bundle.config.levels;
            let mut z_seeds = Vec::new();
            if mode == Mode::AdvEg && lambda_adv != 0.0 {
                let d = &mut bundle.classifier;
                d.set_trainable(false);
                let la = d.output_id(names::ADVERSARIAL)?;
                let res = d.backward(&[(la, &[T::lit(lambda_adv)])]);
                d.set_trainable(true);
                z_seeds.push(res?.swap_remove(0));
            }
            let dl = bundle.decoder.output_id(names::RECONSTRUCTION)?;
            let g_grads = bundle.decoder.backward(&[(dl, &[T::one()])])?;
            let mut seeds = seed_outputs(&bundle.encoder, levels, &g_grads)?;
            if let Some(Some(dz_a)) = z_seeds.pop() {
                let dz = &mut seeds[0].1;
                for (a, b) in dz.iter_mut().zip(dz_a.data()) {
                    *a += *b;
                }
            }
            let refs: Vec<_> = seeds.iter().map(|(v, d)| (*v, d.as_slice())).collect();
            bundle.encoder.backward(&refs)?;
            let grads = audit(bundle);
            adam_step(bundle.encoder.params_mut(), &mut optim.encoder, adam)?;
            adam_step(bundle.decoder.params_mut(), &mut optim.decoder, adam)?;
            Ok(StepReport { losses, grads, correct })
        }
        Mode::TrainD => {
            let ln = bundle.classifier.output_id(names::NUISANCE)?;
            bundle.classifier.backward(&[(ln, &[T::one()])])?;
            let grads = audit(bundle);
            adam_step(bundle.classifier.params_mut(), &mut optim.classifier, adam)?;
            Ok(StepReport { losses, grads, correct })
        }
    }
}

/// Classifier-only step on precomputed latents (probe training and the
/// passenger classifier of a non-adversarial run).
pub fn classifier_step<T: Scalar>(
    classifier: &mut Graph<T>,
    state: &mut AdamState<T>,
    z: &Tensor<T>,
    targets: &Tensor<T>,
    adam: &AdamConfig,
) -> Result<f64> {
    classifier.params_mut().zero_grad();
    classifier.forward(&[z, targets])?;
    let l_n = scalar_of(classifier, names::NUISANCE)?;
    if !l_n.is_finite() {
        return Err(Error::Numeric(format!("L_N is {l_n}; step aborted")));
    }
    let id = classifier.output_id(names::NUISANCE)?;
    classifier.backward(&[(id, &[T::one()])])?;
    adam_step(classifier.params_mut(), state, adam)?;
    Ok(l_n)
}

// ---- epoch loop ---------------------------------------------------------

/// JSON has no NaN; absent values are written as `null`.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: Mode,
    #[serde(with = "nan_as_null")]
    pub val_g: f64,
    #[serde(with = "nan_as_null")]
    pub val_d: f64,
    #[serde(with = "nan_as_null")]
    pub l_r: f64,
    #[serde(with = "nan_as_null")]
    pub l_n: f64,
    #[serde(with = "nan_as_null")]
    pub l_a: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,mode,val_g,val_d,l_r,l_n,l_a";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.mode, self.val_g, self.val_d, self.l_r, self.l_n, self.l_a
        )
    }
}

pub fn write_epoch_csv(log: &[EpochLog], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "{}", EpochLog::CSV_HEADER)?;
    for e in log {
        writeln!(out, "{}", e.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub epochs: usize,
    pub val_g: f64,
    pub best_val_g: f64,
    pub guard_tripped: bool,
}

/// Everything beyond the parameters needed to resume a run bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Number of main-loop epochs completed.
    pub epoch: usize,
    pub val_g: f64,
    pub val_d: f64,
    pub warmup: Option<WarmupReport>,
    pub log: Vec<EpochLog>,
    pub optim: Optimizers<T>,
}

/// Validation scores: mean SSIM of G's output against the clear image, and
/// D's accuracy on the current latents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub val_g: f64,
    pub val_d: f64,
}

fn planar_to_image<T: Scalar>(data: &[T], h: usize, w: usize) -> Result<Image<f64>> {
    let v: Vec<f64> = data.iter().map(|x| x.as_f64()).collect();
    Image::from_planar(h, w, 3, &v)
}

/// Per-sample SSIM of `outputs` (`[N, 3, H, W]`) against the clear images of
/// the referenced samples.
pub fn batch_ssim<T: Scalar>(outputs: &Tensor<T>, truth: &Tensor<T>) -> Result<Vec<f64>> {
    let s = outputs.shape();
    let (h, w) = (s[2], s[3]);
    let per = 3 * h * w;
    outputs
        .data()
        .chunks(per)
        .zip(truth.data().chunks(per))
        .map(|(o, t)| metrics::ssim(&planar_to_image(o, h, w)?, &planar_to_image(t, h, w)?))
        .collect()
}

/// Encoder, decoder and classifier outputs for a whole set, in order.
pub struct SetOutputs<T> {
    pub latents: Vec<Tensor<T>>,
    pub ssim: Vec<f64>,
    pub correct: usize,
}

/// Run E, G and D over `set` in batches of `batch_size`.
pub fn evaluate_set<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    set: &SampleSet,
    batch_size: usize,
    zero_skips: bool,
) -> Result<SetOutputs<T>> {
    let mut out = SetOutputs {
        latents: Vec::new(),
        ssim: Vec::with_capacity(set.len()),
        correct: 0,
    };
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b: Batch<T> = set.batch(chunk, bundle.config.num_classes)?;
        let mut enc = bundle.encode(&b.degraded)?;
        if zero_skips {
            for s in enc.skips.iter_mut() {
                s.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let img = bundle.decode(&enc)?;
        out.ssim.extend(batch_ssim(&img, &b.clear)?);
        let probs = bundle.classify(&enc.z)?;
        out.correct += count_correct(&probs, &b.class_ids);
        out.latents.push(enc.z);
    }
    Ok(out)
}

pub fn validate<T: Scalar>(bundle: &mut ModelBundle<T>, val: &SampleSet, batch_size: usize) -> Result<Validation> {
    if val.is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let o = evaluate_set(bundle, val, batch_size, false)?;
    Ok(Validation {
        val_g: metrics::mean(&o.ssim),
        val_d: o.correct as f64 / val.len() as f64,
    })
}

fn epoch_order(seed: u64, phase: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let s = derive_seed(seed, &[b"shuffle", phase.as_bytes(), &(epoch as u64).to_le_bytes()]);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    idx
}

fn mean_finite(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        metrics::mean(v)
    }
}

/// A model, its training configuration and the resumable loop state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub bundle: ModelBundle<T>,
    pub config: TrainConfig,
    pub state: TrainState<T>,
    /// When false the classifier is never evaluated or trained: a
    /// classifier-free encoder-decoder run. Only meaningful with
    /// `lambda_adv == 0`.
    pub with_classifier: bool,
}

impl<T: Scalar> Trainer<T> {
    /// Build and initialise a fresh model from `config.seed`.
    pub fn new(arch: &ArchitectureConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut bundle = build_model(arch)?;
        bundle.init(config.seed);
        Ok(Self::from_parts(bundle, config, None))
    }

    pub fn from_parts(bundle: ModelBundle<T>, config: TrainConfig, state: Option<TrainState<T>>) -> Self {
        let state = state.unwrap_or_else(|| TrainState {
            epoch: 0,
            val_g: 0.0,
            val_d: 0.0,
            warmup: None,
            log: Vec::new(),
            optim: Optimizers::new(&bundle),
        });
        Self {
            bundle,
            config,
            state,
            with_classifier: true,
        }
    }

    /// Drop the classifier from every code path (requires `lambda_adv == 0`).
    pub fn classifier_free(mut self) -> Result<Self> {
        if self.config.adversarial() {
            return Err(Error::Config("a classifier-free run needs lambda_adv = 0".into()));
        }
        self.with_classifier = false;
        Ok(self)
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::InvalidInput(
                "training and validation splits must be nonempty".into(),
            ));
        }
        let c = &self.bundle.config;
        for set in [&data.train, &data.val] {
            if set.height != c.height || set.width != c.width {
                return Err(Error::shape(
                    "training data",
                    format!(
                        "{}x{} images for a {}x{} model",
                        set.height, set.width, c.height, c.width
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&mut self, val: &SampleSet) -> Result<Validation> {
        validate(&mut self.bundle, val, self.config.eval_batch_size)
    }

    /// One pass over the training split in `mode`; returns mean losses.
    fn epoch_pass(&mut self, data: &TrainData, mode: Mode, phase: &str, epoch: usize) -> Result<LossValues> {
        let order = epoch_order(self.config.seed, phase, epoch, data.train.len());
        let (mut lr, mut ln, mut la) = (Vec::new(), Vec::new(), Vec::new());
        let m = self.bundle.config.num_classes;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = data.train.batch(chunk, m)?;
            let r = apply_routed_update(
                &mut self.bundle,
                &mut self.state.optim,
                &batch,
                mode,
                self.config.lambda_adv,
                &self.config.adam,
            )?;
            lr.push(r.losses.l_r);
            if mode != Mode::WarmupEg {
                ln.push(r.losses.l_n);
                la.push(r.losses.l_a);
            }
        }
        Ok(LossValues {
            l_r: mean_finite(&lr),
            l_n: mean_finite(&ln),
            l_a: mean_finite(&la),
        })
    }

    /// Train D alone on detached latents of the current encoder.
    fn classifier_pass(&mut self, data: &TrainData, epoch: usize) -> Result<LossValues> {
        let order = epoch_order(self.config.seed, "classifier", epoch, data.train.len());
        let m = self.bundle.config.num_classes;
        let mut ln = Vec::new();
        let mut la = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Batch<T> = data.train.batch(chunk, m)?;
            let z = self.bundle.encode(&batch.degraded)?.z;
            ln.push(classifier_step(
                &mut self.bundle.classifier,
                &mut self.state.optim.classifier,
                &z,
                &batch.targets,
                &self.config.adam,
            )?);
            la.push(scalar_of(&self.bundle.classifier, names::ADVERSARIAL)?);
        }
        Ok(LossValues {
            l_r: f64::NAN,
            l_n: mean_finite(&ln),
            l_a: mean_finite(&la),
        })
    }

    /// Repeat WARMUP_EG epochs until validation SSIM reaches `threshold_g`
    /// or `max_warmup_epochs` is exhausted (logged as a warning).
    pub fn run_warmup(&mut self, data: &TrainData) -> Result<WarmupReport> {
        self.check_data(data)?;
        let mut v = self.validate(&data.val)?.val_g;
        let mut best = v;
        let mut epochs = 0;
        while v < self.config.threshold_g && epochs < self.config.max_warmup_epochs {
            let l = self.epoch_pass(data, Mode::WarmupEg, "warmup", epochs)?;
            epochs += 1;
            v = self.validate(&data.val)?.val_g;
            best = best.max(v);
            log::info!("warmup epoch {epochs}: L_R {:.5} val_G {v:.4}", l.l_r);
        }
        let guard_tripped = v < self.config.threshold_g;
        if guard_tripped {
            log::warn!(
                "warmup stopped after {epochs} epochs without reaching threshold_G {} (best val_G {best:.4})",
                self.config.threshold_g
            );
        }
        let val = self.validate(&data.val)?;
        self.state.val_g = val.val_g;
        self.state.val_d = val.val_d;
        let report = WarmupReport {
            epochs,
            val_g: v,
            best_val_g: best,
            guard_tripped,
        };
        self.state.warmup = Some(report.clone());
        Ok(report)
    }

    /// Run one main-loop epoch and append it to the log.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochLog> {
        if self.state.warmup.is_none() {
            return Err(Error::State("main training loop started before warmup".into()));
        }
        self.check_data(data)?;
        let epoch = self.state.epoch;
        let (mode, losses) = if self.config.adversarial() {
            let d = decide_epoch_mode(self.state.val_g, self.state.val_d, &self.config);
            (d.mode, self.epoch_pass(data, d.mode, "main", epoch)?)
        } else {
            // Without the adversarial term every gated branch reduces to an
            // L_R update of E and G; D only trains on detached latents so
            // val_D stays meaningful.
            let eg = self.epoch_pass(data, Mode::WarmupEg, "main", epoch)?;
            let d = if self.with_classifier {
                self.classifier_pass(data, epoch)?
            } else {
                LossValues {
                    l_r: f64::NAN,
                    l_n: f64::NAN,
                    l_a: f64::NAN,
                }
            };
            (Mode::AdvEg, LossValues { l_r: eg.l_r, ..d })
        };
        let val = if self.with_classifier {
            self.validate(&data.val)?
        } else {
            let o = evaluate_set(&mut self.bundle, &data.val, self.config.eval_batch_size, false)?;
            Validation {
                val_g: metrics::mean(&o.ssim),
                val_d: f64::NAN,
            }
        };
        self.state.val_g = val.val_g;
        self.state.val_d = val.val_d;
        self.state.epoch += 1;
        let entry = EpochLog {
            epoch,
            mode,
            val_g: val.val_g,
            val_d: val.val_d,
            l_r: losses.l_r,
            l_n: losses.l_n,
            l_a: losses.l_a,
        };
        log::info!(
            "epoch {epoch} {mode}: L_R {:.5} L_N {:.4} L_A {:.4} val_G {:.4} val_D {:.4}",
            entry.l_r,
            entry.l_n,
            entry.l_a,
            entry.val_g,
            entry.val_d
        );
        self.state.log.push(entry.clone());
        Ok(entry)
    }

    /// Warm up if needed, then run the remaining epochs. `on_epoch` is
    /// called after every epoch (checkpointing lives there); an error from
    /// training aborts the loop, leaving earlier checkpoints in place.
    pub fn run_training(&mut self, data: &TrainData, mut on_epoch: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        if self.state.warmup.is_none() {
            self.run_warmup(data)?;
        }
        while self.state.epoch < self.config.epochs {
            self.run_epoch(data)?;
            on_epoch(self)?;
        }
        Ok(())
    }
}
