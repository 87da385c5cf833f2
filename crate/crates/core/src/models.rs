//! Encoder E, skip-connected decoder G and nuisance classifier D.

use serde::{Deserialize, Serialize};

use crate::autodiff::{init_params, Graph, Tensor};
use crate::error::{Error, Result};
use crate::formation::derive_seed;
use crate::scalar::Scalar;

/// Probability floor applied inside the nuisance cross entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of the first encoder level; level `l` has `base << l`.
    pub base_channels: usize,
    /// Number of down/up levels.
    pub levels: usize,
    /// Channels of the bottleneck code Z.
    pub latent_channels: usize,
    /// Output widths of the classifier's stride-2 conv stages.
    pub classifier_widths: Vec<usize>,
    pub num_classes: usize,
    /// Leaky-ReLU slope in the encoder and classifier (decoder uses ReLU).
    pub leaky_slope: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::desk(8, 3)
    }
}

impl ArchitectureConfig {
    /// 32x32 inputs, six classes, latent `base << levels`, classifier stages
    /// at 2x, 4x, 4x the latent width.
    pub fn desk(base_channels: usize, levels: usize) -> Self {
        let latent = base_channels << levels;
        Self {
            height: 32,
            width: 32,
            base_channels,
            levels,
            latent_channels: latent,
            classifier_widths: vec![2 * latent, 4 * latent, 4 * latent],
            num_classes: 6,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.levels;
        if self.levels == 0 {
            return Err(Error::Config("at least one down/up level is required".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{}",
                self.height, self.width, self.levels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.base_channels == 0 || self.latent_channels == 0 || self.classifier_widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `[C, H, W]` of the bottleneck code Z.
    pub fn latent_shape(&self) -> [usize; 3] {
        let f = 1 << self.levels;
        [self.latent_channels, self.height / f, self.width / f]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }

    /// `[C, H, W]` of the skip activation emitted at `level`.
    pub fn skip_shape(&self, level: usize) -> [usize; 3] {
        [self.level_channels(level), self.height >> level, self.width >> level]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }
}

/// Output names used by the three graphs.
pub mod names {
    pub const Z: &str = "z";
    pub const IMAGE: &str = "image";
    pub const RECONSTRUCTION: &str = "reconstruction";
    pub const PROBS: &str = "probs";
    pub const NUISANCE: &str = "nuisance";
    pub const ADVERSARIAL: &str = "adversarial";

    pub fn skip(level: usize) -> String {
        format!("skip{level}")
    }
}

/// The three networks and their shared architecture.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub config: ArchitectureConfig,
    pub encoder: Graph<T>,
    pub decoder: Graph<T>,
    pub classifier: Graph<T>,
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded<T> {
    pub z: Tensor<T>,
    /// Skip activations, level 0 (full resolution) first.
    pub skips: Vec<Tensor<T>>,
}

fn build_encoder<T: Scalar>(cfg: &ArchitectureConfig) -> Result<Graph<T>> {
    let mut g = Graph::new("encoder");
    let mut x = g.input(names::IMAGE, &cfg.image_shape());
    let slope = cfg.leaky_slope;
    let mut skips = Vec::new();
    for l in 0..cfg.levels {
        let c = cfg.level_channels(l);
        let h = g.conv2d(&format!("down{l}.conv1"), x, c, 3, 1, 1)?;
        let h = g.leaky_relu(&format!("down{l}.act1"), h, slope)?;
        let h = g.conv2d(&format!("down{l}.conv2"), h, c, 3, 1, 1)?;
        let h = g.leaky_relu(&format!("down{l}.act2"), h, slope)?;
        skips.push(h);
        x = g.max_pool2d(&format!("down{l}.pool"), h)?;
    }
    let h = g.conv2d("bottleneck.conv1", x, cfg.latent_channels, 3, 1, 1)?;
    let h = g.leaky_relu("bottleneck.act1", h, slope)?;
    let h = g.conv2d("bottleneck.conv2", h, cfg.latent_channels, 3, 1, 1)?;
    let z = g.leaky_relu("bottleneck.act2", h, slope)?;
    g.mark_output(names::Z, z);
    for (l, s) in skips.into_iter().enumerate() {
        g.mark_output(&names::skip(l), s);
    }
    Ok(g)
}

fn build_decoder<T: Scalar>(cfg: &ArchitectureConfig) -> Result<Graph<T>> {
    let mut g = Graph::new("decoder");
    let mut x = g.input(names::Z, &cfg.latent_shape());
    let skips: Vec<_> = (0..cfg.levels)
        .map(|l| g.input(&names::skip(l), &cfg.skip_shape(l)))
        .collect();
    let target = g.input("target", &cfg.image_shape());
    for l in (0..cfg.levels).rev() {
        let c = cfg.level_channels(l);
        let u = g.upsample_nearest(&format!("up{l}.upsample"), x)?;
        let u = g.conv2d(&format!("up{l}.conv_up"), u, c, 3, 1, 1)?;
        let u = g.relu(&format!("up{l}.act_up"), u)?;
        let cat = g.concat_channels(&format!("up{l}.concat"), &[u, skips[l]])?;
        let h = g.conv2d(&format!("up{l}.conv1"), cat, c, 3, 1, 1)?;
        let h = g.relu(&format!("up{l}.act1"), h)?;
        let h = g.conv2d(&format!("up{l}.conv2"), h, c, 3, 1, 1)?;
        x = g.relu(&format!("up{l}.act2"), h)?;
    }
    let h = g.conv2d("head.conv", x, 3, 1, 1, 0)?;
    let img = g.sigmoid("head.sigmoid", h)?;
    let loss = g.mse("loss.reconstruction", img, target)?;
    g.mark_output(names::IMAGE, img);
    g.mark_output(names::RECONSTRUCTION, loss);
    Ok(g)
}

/// D alone; the probe trains a fresh copy of this architecture.
pub fn build_classifier<T: Scalar>(cfg: &ArchitectureConfig) -> Result<Graph<T>> {
    let mut g = Graph::new("classifier");
    let mut x = g.input(names::Z, &cfg.latent_shape());
    let target = g.input("target", &[cfg.num_classes]);
    for (i, w) in cfg.classifier_widths.iter().enumerate() {
        let h = g.conv2d(&format!("stage{i}.conv"), x, *w, 3, 2, 1)?;
        x = g.leaky_relu(&format!("stage{i}.act"), h, cfg.leaky_slope)?;
    }
    let pooled = g.global_avg_pool("pool", x)?;
    let logits = g.linear("fc", pooled, cfg.num_classes)?;
    let probs = g.softmax("softmax", logits)?;
    let ln = g.cross_entropy("loss.nuisance", probs, target, PROB_FLOOR)?;
    let la = g.neg_entropy("loss.adversarial", probs)?;
    g.mark_output("logits", logits);
    g.mark_output(names::PROBS, probs);
    g.mark_output(names::NUISANCE, ln);
    g.mark_output(names::ADVERSARIAL, la);
    Ok(g)
}

/// Build E, G and D for `config`; parameters start at zero until
/// [`ModelBundle::init`] is called.
pub fn build_model<T: Scalar>(config: &ArchitectureConfig) -> Result<ModelBundle<T>> {
    config.validate()?;
    Ok(ModelBundle {
        config: config.clone(),
        encoder: build_encoder(config)?,
        decoder: build_decoder(config)?,
        classifier: build_classifier(config)?,
    })
}

fn batch_of<T: Scalar>(t: &Tensor<T>, per_sample: &[usize], what: &str) -> Result<usize> {
    if t.shape().len() != per_sample.len() + 1 || t.shape()[1..] != *per_sample {
        return Err(Error::shape(
            what,
            format!("expected [N, {per_sample:?}], got {:?}", t.shape()),
        ));
    }
    Ok(t.shape()[0])
}

impl<T: Scalar> ModelBundle<T> {
    /// Initialize all three parameter sets deterministically from `seed`.
    pub fn init(&mut self, seed: u64) {
        init_params(self.encoder.params_mut(), derive_seed(seed, &[b"encoder"]));
        init_params(self.decoder.params_mut(), derive_seed(seed, &[b"decoder"]));
        init_params(self.classifier.params_mut(), derive_seed(seed, &[b"classifier"]));
    }

    pub fn graphs(&self) -> [&Graph<T>; 3] {
        [&self.encoder, &self.decoder, &self.classifier]
    }

    pub fn graphs_mut(&mut self) -> [&mut Graph<T>; 3] {
        [&mut self.encoder, &mut self.decoder, &mut self.classifier]
    }

    /// Run E on `[N, 3, H, W]` images.
    pub fn encode(&mut self, images: &Tensor<T>) -> Result<Encoded<T>> {
        batch_of(images, &self.config.image_shape(), "encoder.image")?;
        self.encoder.forward(&[images])?;
        self.encoded()
    }

    /// Encoder outputs of the most recent forward pass.
    pub fn encoded(&self) -> Result<Encoded<T>> {
        Ok(Encoded {
            z: self.encoder.output(names::Z)?,
            skips: (0..self.config.levels)
                .map(|l| self.encoder.output(&names::skip(l)))
                .collect::<Result<_>>()?,
        })
    }

    fn decoder_inputs<'a>(&self, enc: &'a Encoded<T>) -> Result<Vec<&'a Tensor<T>>> {
        let n = batch_of(&enc.z, &self.config.latent_shape(), "decoder.z")?;
        if enc.skips.len() != self.config.levels {
            return Err(Error::shape(
                "decoder",
                format!("expected {} skips, got {}", self.config.levels, enc.skips.len()),
            ));
        }
        for (l, s) in enc.skips.iter().enumerate() {
            if batch_of(s, &self.config.skip_shape(l), &format!("decoder.skip{l}"))? != n {
                return Err(Error::shape(format!("decoder.skip{l}"), "batch size differs from z"));
            }
        }
        let mut inputs: Vec<&Tensor<T>> = vec![&enc.z];
        inputs.extend(enc.skips.iter());
        Ok(inputs)
    }

    /// Run G against `target` so the reconstruction loss is available.
    pub fn decode_with_target(&mut self, enc: &Encoded<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        let mut inputs = self.decoder_inputs(enc)?;
        batch_of(target, &self.config.image_shape(), "decoder.target")?;
        inputs.push(target);
        self.decoder.forward(&inputs)?;
        self.decoder.output(names::IMAGE)
    }

    /// Reconstructed `[N, 3, H, W]` images in `[0, 1]`.
    pub fn decode(&mut self, enc: &Encoded<T>) -> Result<Tensor<T>> {
        let n = enc.z.shape()[0];
        let mut shape = vec![n];
        shape.extend_from_slice(&self.config.image_shape());
        let dummy = Tensor::zeros(&shape);
        self.decode_with_target(enc, &dummy)
    }

    /// Run D against one-hot `targets` so both classifier losses are available.
    pub fn classify_with_target(&mut self, z: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
        let n = batch_of(z, &self.config.latent_shape(), "classifier.z")?;
        if batch_of(targets, &[self.config.num_classes], "classifier.target")? != n {
            return Err(Error::shape("classifier.target", "batch size differs from z"));
        }
        self.classifier.forward(&[z, targets])?;
        self.classifier.output(names::PROBS)
    }

    /// Class probabilities `[N, M]` for latent codes `z`.
    pub fn classify(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let n = z.shape().first().copied().unwrap_or(0);
        let targets = Tensor::zeros(&[n, self.config.num_classes]);
        self.classify_with_target(z, &targets)
    }

    /// `decode(encode(images))`.
    pub fn reconstruct(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.encode(images)?;
        self.decode(&enc)
    }
}

/// One-hot rows for class ids.
pub fn one_hot<T: Scalar>(classes: &[usize], num_classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[classes.len(), num_classes]);
    for (n, c) in classes.iter().enumerate() {
        t.data_mut()[n * num_classes + c] = T::one();
    }
    t
}
