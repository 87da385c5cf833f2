//! How much water-type information the latent code still carries: PCA
//! projection, silhouette scores and a freshly trained probe classifier.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_params, AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::formation::derive_seed;
use crate::metrics;
use crate::models::{build_classifier, names, one_hot, ArchitectureConfig, ModelBundle};
use crate::training::{classifier_step, evaluate_set, SampleSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    /// Z flattened in (channel, row, col) order.
    pub z: Vec<f64>,
    pub class_id: usize,
    pub scene_id: String,
}

/// One record per sample, in sample order.
pub fn collect_latents(bundle: &mut ModelBundle<f32>, set: &SampleSet, batch_size: usize) -> Result<Vec<LatentRecord>> {
    if set.is_empty() {
        return Err(Error::InvalidInput("cannot collect latents of an empty set".into()));
    }
    let d = bundle.config.latent_len();
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = set.batch::<f32>(chunk, bundle.config.num_classes)?;
        let z = bundle.encode(&b.degraded)?.z;
        for (row, &i) in z.data().chunks(d).zip(chunk) {
            let s = &set.samples[i];
            out.push(LatentRecord {
                z: row.iter().map(|v| *v as f64).collect(),
                class_id: s.class_id,
                scene_id: s.scene_id.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal axes, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue over total variance, nonincreasing.
    pub explained_ratio: Vec<f64>,
    /// Projection of every input point onto the components.
    pub coords: Vec<Vec<f64>>,
}

const POWER_MAX_ITERS: usize = 100_000;
const POWER_TOL: f64 = 1e-14;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Leading eigenpair of the symmetric PSD matrix `c` (row-major `d x d`),
/// kept orthogonal to `basis`.
fn power_iteration(c: &[f64], d: usize, basis: &[Vec<f64>], seed: u64) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthogonalize(&mut v, basis);
    normalize(&mut v);
    let mut w = vec![0.0; d];
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = dot(&c[i * d..(i + 1) * d], &v);
        }
        orthogonalize(&mut w, basis);
        lambda = normalize(&mut w);
        if lambda == 0.0 {
            return (0.0, v);
        }
        let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut w);
        if diff < POWER_TOL {
            break;
        }
    }
    (lambda, v)
}

/// Mean-centre `points` and project onto the top `k` covariance eigenvectors,
/// found by power iteration with deflation.
pub fn pca_project(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if k == 0 || n < k + 1 || k > d {
        return Err(Error::InvalidInput(format!(
            "PCA with k={k} needs at least {} points of dimension >= {k}; got {n} of dimension {d}",
            k + 1
        )));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("pca_project", "points differ in dimensionality"));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| metrics::mean(&points.iter().map(|p| p[j]).collect::<Vec<_>>()))
        .collect();
    let centred: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let denom = (n - 1) as f64;
    let mut cov: Vec<f64> = (0..d * d)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / d, ij % d);
            if j < i {
                return 0.0;
            }
            let terms: Vec<f64> = centred.iter().map(|p| p[i] * p[j]).collect();
            metrics::pairwise_sum(&terms) / denom
        })
        .collect();
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(total > 0.0) {
        return Err(Error::Rank("all points are identical; covariance is zero".into()));
    }
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for c in 0..k {
        let (lambda, v) = power_iteration(&cov, d, &components, derive_seed(0, &[b"pca", &[c as u8]]));
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let explained_ratio = eigenvalues.iter().map(|l| l / total).collect();
    let coords = centred
        .iter()
        .map(|p| components.iter().map(|v| dot(p, v)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        explained_ratio,
        coords,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette over all points with Euclidean distance.
pub fn silhouette<L: Ord + Clone + Debug + Sync>(coords: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if coords.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} points but {} labels",
            coords.len(),
            labels.len()
        )));
    }
    let mut groups: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        *groups.entry(l).or_default() += 1;
    }
    if groups.len() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two labels".into()));
    }
    if let Some((l, _)) = groups.iter().find(|(_, n)| **n < 2) {
        return Err(Error::InvalidInput(format!("label {l:?} has a single member")));
    }
    let keys: Vec<&L> = groups.keys().copied().collect();
    let slot: Vec<usize> = labels.iter().map(|l| keys.binary_search(&l).unwrap()).collect();
    let sizes: Vec<usize> = groups.values().copied().collect();
    let scores: Vec<f64> = (0..coords.len())
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![0.0; keys.len()];
            for (j, p) in coords.iter().enumerate() {
                if j != i {
                    sums[slot[j]] += euclid(&coords[i], p);
                }
            }
            let own = slot[i];
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..keys.len())
                .filter(|c| *c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(metrics::mean(&scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of records used for training.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn stack_rows(rows: &[&[f64]], shape: &[usize]) -> Result<Tensor<f32>> {
    let data = rows.iter().flat_map(|r| r.iter().map(|v| *v as f32)).collect();
    let mut s = vec![rows.len()];
    s.extend_from_slice(shape);
    Tensor::new(&s, data)
}

/// Train a fresh classifier of D's architecture on frozen `latents` and
/// report held-out accuracy. Records are split by a seeded shuffle.
pub fn probe_accuracy(
    latents: &[Vec<f64>],
    labels: &[usize],
    arch: &ArchitectureConfig,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let shape = arch.latent_shape();
    let d = arch.latent_len();
    let m = arch.num_classes;
    if latents.len() != labels.len() || latents.iter().any(|z| z.len() != d) {
        return Err(Error::shape(
            "probe",
            format!("expected {} vectors of length {d}", labels.len()),
        ));
    }
    if let Some(l) = labels.iter().find(|l| **l >= m) {
        return Err(Error::InvalidInput(format!("label {l} outside {m} classes")));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"probe", b"split"])));
    let n_train = ((labels.len() as f64) * cfg.train_fraction).round() as usize;
    let (train, test) = order.split_at(n_train.min(labels.len()));
    if test.is_empty() {
        return Err(Error::Split("held-out split is empty".into()));
    }
    let present: std::collections::BTreeSet<usize> = train.iter().map(|i| labels[*i]).collect();
    let wanted: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if let Some(c) = wanted.difference(&present).next() {
        return Err(Error::Split(format!(
            "class {c} is absent from the probe's training split"
        )));
    }

    let mut clf = build_classifier::<f32>(arch)?;
    init_params(clf.params_mut(), derive_seed(seed, &[b"probe", b"init"]));
    let mut adam = AdamState::new(clf.params());
    for epoch in 0..cfg.epochs {
        let mut idx = train.to_vec();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[b"probe", b"shuffle", &(epoch as u64).to_le_bytes()],
        )));
        for chunk in idx.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<&[f64]> = chunk.iter().map(|i| latents[*i].as_slice()).collect();
            let z = stack_rows(&rows, &shape)?;
            let ys: Vec<usize> = chunk.iter().map(|i| labels[*i]).collect();
            classifier_step(&mut clf, &mut adam, &z, &one_hot(&ys, m), &cfg.adam)?;
        }
    }

    let mut correct = 0;
    for chunk in test.chunks(256) {
        let rows: Vec<&[f64]> = chunk.iter().map(|i| latents[*i].as_slice()).collect();
        let z = stack_rows(&rows, &shape)?;
        clf.forward(&[&z, &Tensor::zeros(&[chunk.len(), m])])?;
        let probs = clf.output(names::PROBS)?;
        for (row, i) in probs.data().chunks(m).zip(chunk) {
            let mut best = 0;
            for (c, p) in row.iter().enumerate() {
                if *p > row[best] {
                    best = c;
                }
            }
            correct += (best == labels[*i]) as usize;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// The per-model analysis summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    /// Silhouette of the 2-D PCA coordinates grouped by water type.
    pub silhouette_by_type: f64,
    /// Same coordinates grouped by scene.
    pub silhouette_by_content: f64,
    pub probe_accuracy: f64,
    /// Silhouettes over the full latent vectors.
    pub silhouette_by_type_latent: f64,
    pub silhouette_by_content_latent: f64,
    pub explained_variance: Vec<f64>,
    pub n_pca: usize,
    pub probe_train: usize,
    pub probe_test: usize,
    /// Mean decoder SSIM on the PCA set with skip activations zeroed.
    pub zero_skip_ssim: Option<f64>,
}

pub struct Analysis {
    pub summary: AnalysisSummary,
    pub records: Vec<LatentRecord>,
    pub pca: Pca,
}

impl Analysis {
    /// `scene_id,class_id,pc1,pc2` per PCA record.
    pub fn write_pca_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "scene_id,class_id,pc1,pc2")?;
        for (r, c) in self.records.iter().zip(&self.pca.coords) {
            writeln!(out, "{},{},{},{}", r.scene_id, r.class_id, c[0], c[1])?;
        }
        Ok(())
    }
}

/// PCA and silhouettes on `pca_set`; probe on the latents of `probe_set`.
pub fn analyze(
    bundle: &mut ModelBundle<f32>,
    pca_set: &SampleSet,
    probe_set: &SampleSet,
    probe: &ProbeConfig,
    seed: u64,
    zero_skips: bool,
) -> Result<Analysis> {
    let records = collect_latents(bundle, pca_set, 64)?;
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.z.clone()).collect();
    let pca = pca_project(&vectors, 2)?;
    let types: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    let scenes: Vec<&str> = records.iter().map(|r| r.scene_id.as_str()).collect();

    let probe_records = collect_latents(bundle, probe_set, 64)?;
    let pz: Vec<Vec<f64>> = probe_records.iter().map(|r| r.z.clone()).collect();
    let pl: Vec<usize> = probe_records.iter().map(|r| r.class_id).collect();
    let p = probe_accuracy(&pz, &pl, &bundle.config.clone(), probe, seed)?;

    let zero_skip_ssim = if zero_skips {
        Some(metrics::mean(&evaluate_set(bundle, pca_set, 64, true)?.ssim))
    } else {
        None
    };
    let summary = AnalysisSummary {
        silhouette_by_type: silhouette(&pca.coords, &types)?,
        silhouette_by_content: silhouette(&pca.coords, &scenes)?,
        probe_accuracy: p.accuracy,
        silhouette_by_type_latent: silhouette(&vectors, &types)?,
        silhouette_by_content_latent: silhouette(&vectors, &scenes)?,
        explained_variance: pca.explained_ratio.clone(),
        n_pca: records.len(),
        probe_train: p.n_train,
        probe_test: p.n_test,
        zero_skip_ssim,
    };
    Ok(Analysis { summary, records, pca })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_line() {
        let dir: Vec<f64> = (0..10).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|t| dir.iter().map(|d| d * (t as f64 - 7.0) + 3.0).collect())
            .collect();
        let p = pca_project(&pts, 2).unwrap();
        assert!(p.explained_ratio[0] >= 0.999);
        for c in 0..2 {
            let m = metrics::mean(&p.coords.iter().map(|x| x[c]).collect::<Vec<_>>());
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn identical_points_are_rank_error() {
        let pts = vec![vec![1.0, 2.0, 3.0]; 5];
        assert!(matches!(pca_project(&pts, 2), Err(Error::Rank(_))));
        assert!(pca_project(&pts[..2], 2).is_err());
    }

    #[test]
    fn separated_clusters_score_high() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let e = i as f64 * 0.01;
            pts.push(vec![e, -e]);
            labels.push(0);
            pts.push(vec![100.0 + e, 100.0]);
            labels.push(1);
        }
        assert!(silhouette(&pts, &labels).unwrap() > 0.9);
    }

    #[test]
    fn singleton_cluster_named() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let err = silhouette(&pts, &["a", "a", "lonely"]).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }
}
