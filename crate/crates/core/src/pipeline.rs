//! End-to-end stages behind the command-line tool: synthesize, train,
//! evaluate, probe.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, Analysis, ProbeConfig};
use crate::datastore::{
    atomic_write, load_checkpoint, load_samples, read_manifest, read_scene_dir, save_checkpoint, write_dataset,
    ManifestEntry, Split,
};
use crate::error::{Error, Result};
use crate::formation::{synthesize_dataset, CoefficientTable, SceneSample, SynthesisRanges};
use crate::image::Image;
use crate::metrics::{self, aggregate_scores, MetricReport};
use crate::models::{ArchitectureConfig, ModelBundle};
use crate::training::{write_epoch_csv, TrainConfig, TrainData, Trainer};

/// Contents of a `--config` file. Missing sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.architecture.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Degrade `scenes` under every water type and write the dataset under `out`.
pub fn synth_scenes(
    scenes: &[SceneSample<f32>],
    table: &CoefficientTable<f32>,
    out: &Path,
    draws: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let samples = synthesize_dataset(scenes, table.specs(), draws, seed, &SynthesisRanges::default())?;
    write_dataset(out, scenes, &samples)
}

/// `synth`: scenes from `scenes_dir` (`clear/<id>.png`, `depth/<id>.png`).
pub fn synth(scenes_dir: &Path, coeffs: &Path, out: &Path, draws: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    let scenes = read_scene_dir(scenes_dir)?;
    let table = CoefficientTable::<f32>::load(coeffs)?;
    synth_scenes(&scenes, &table, out, draws, seed)
}

pub fn load_train_data(manifest: &Path) -> Result<TrainData> {
    let entries = read_manifest(manifest)?;
    Ok(TrainData {
        train: load_samples(manifest, &entries, Some(Split::Train))?,
        val: load_samples(manifest, &entries, Some(Split::Val))?,
    })
}

/// Where `train` leaves its artifacts.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub out: PathBuf,
}

impl TrainPaths {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    /// Final model.
    pub fn model(&self) -> PathBuf {
        self.out.join("model.bin")
    }

    /// Rewritten after every epoch.
    pub fn latest(&self) -> PathBuf {
        self.out.join("latest.bin")
    }

    /// Periodic snapshot after `epoch` completed epochs.
    pub fn snapshot(&self, epoch: usize) -> PathBuf {
        self.out.join(format!("checkpoint_{epoch:04}.bin"))
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.out.join("epochs.csv")
    }
}

fn write_log(trainer: &Trainer<f32>, paths: &TrainPaths) -> Result<()> {
    let mut csv = Vec::new();
    write_epoch_csv(&trainer.state.log, &mut csv).map_err(|e| Error::io(paths.epoch_log(), e))?;
    atomic_write(&paths.epoch_log(), &csv)
}

/// `train`: warm up, run the epoch loop with periodic checkpoints and write
/// the final model. With `resume`, training continues from that checkpoint
/// (its own configuration wins over `cfg`).
pub fn train(
    manifest: &Path,
    cfg: &RunConfig,
    out: &Path,
    no_adversarial: bool,
    resume: Option<&Path>,
) -> Result<Trainer<f32>> {
    let data = load_train_data(manifest)?;
    let mut trainer = match resume {
        Some(p) => load_checkpoint(p)?,
        None => {
            let mut tc = cfg.training.clone();
            if no_adversarial {
                tc.lambda_adv = 0.0;
            }
            Trainer::new(&cfg.architecture, tc)?
        }
    };
    let paths = TrainPaths::new(out);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let every = trainer.config.checkpoint_every;
    trainer.run_training(&data, |t| {
        let bytes = crate::datastore::encode_checkpoint(t)?;
        if every > 0 && t.state.epoch % every == 0 {
            atomic_write(&paths.snapshot(t.state.epoch), &bytes)?;
        }
        atomic_write(&paths.latest(), &bytes)?;
        write_log(t, &paths)
    })?;
    save_checkpoint(&trainer, &paths.model())?;
    write_log(&trainer, &paths)?;
    Ok(trainer)
}

/// Model-output and identity (degraded input as output) reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReports {
    pub model: MetricReport,
    pub identity: MetricReport,
}

fn planar_image(data: &[f32], h: usize, w: usize) -> Result<Image<f64>> {
    let v: Vec<f64> = data.iter().map(|x| *x as f64).collect();
    Image::from_planar(h, w, 3, &v)
}

/// Per-class SSIM/PSNR of G's reconstructions on `split`.
pub fn evaluate_bundle(bundle: &mut ModelBundle<f32>, manifest: &Path, split: Split) -> Result<EvalReports> {
    let entries = read_manifest(manifest)?;
    let set = load_samples(manifest, &entries, Some(split))?;
    if set.is_empty() {
        return Err(Error::InvalidInput(format!("split {split} is empty")));
    }
    let (h, w) = (set.height, set.width);
    let mut model = Vec::with_capacity(set.len());
    let mut identity = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(64) {
        let b = set.batch::<f32>(chunk, bundle.config.num_classes)?;
        let out = bundle.reconstruct(&b.degraded)?;
        for (k, &i) in chunk.iter().enumerate() {
            let s = &set.samples[i];
            let per = 3 * h * w;
            let truth = planar_image(&s.clear, h, w)?;
            let pred = planar_image(&out.data()[k * per..(k + 1) * per], h, w)?;
            let input = planar_image(&s.degraded, h, w)?;
            model.push((metrics::ssim(&pred, &truth)?, metrics::psnr(&pred, &truth, 1.0)?));
            identity.push((metrics::ssim(&input, &truth)?, metrics::psnr(&input, &truth, 1.0)?));
        }
    }
    let classes = set.class_ids();
    Ok(EvalReports {
        model: aggregate_scores(&classes, &model)?,
        identity: aggregate_scores(&classes, &identity)?,
    })
}

/// `eval`.
pub fn evaluate(checkpoint: &Path, manifest: &Path, split: Split) -> Result<EvalReports> {
    let mut t = load_checkpoint(checkpoint)?;
    evaluate_bundle(&mut t.bundle, manifest, split)
}

pub fn write_report_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| Error::io(path, e))?;
    atomic_write(path, &csv)
}

/// `probe`: PCA and silhouettes on the test split, probe classifier on every
/// record of the manifest.
pub fn probe_bundle(
    bundle: &mut ModelBundle<f32>,
    manifest: &Path,
    probe: &ProbeConfig,
    seed: u64,
    zero_skips: bool,
) -> Result<Analysis> {
    let entries = read_manifest(manifest)?;
    let test = load_samples(manifest, &entries, Some(Split::Test))?;
    let all = load_samples(manifest, &entries, None)?;
    analyze(bundle, &test, &all, probe, seed, zero_skips)
}

pub fn probe(checkpoint: &Path, manifest: &Path, probe: &ProbeConfig, zero_skips: bool) -> Result<Analysis> {
    let mut t = load_checkpoint(checkpoint)?;
    let seed = t.config.seed;
    probe_bundle(&mut t.bundle, manifest, probe, seed, zero_skips)
}

/// Write the summary JSON to `out` and the PCA coordinates beside it as
/// `<stem>_pca.csv`; returns the CSV path.
pub fn write_analysis(a: &Analysis, out: &Path) -> Result<PathBuf> {
    let json = serde_json::to_vec_pretty(&a.summary).map_err(|e| Error::Format(e.to_string()))?;
    atomic_write(out, &json)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("summary");
    let csv_path = out.with_file_name(format!("{stem}_pca.csv"));
    let mut csv = Vec::new();
    a.write_pca_csv(&mut csv).map_err(|e| Error::io(&csv_path, e))?;
    atomic_write(&csv_path, &csv)?;
    Ok(csv_path)
}
