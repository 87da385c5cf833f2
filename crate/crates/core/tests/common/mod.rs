#![allow(dead_code)]

use uie_dal::formation::{synthesize_dataset, CoefficientTable, SynthesisRanges, BUNDLED_COEFFICIENTS};
use uie_dal::image::Image;
use uie_dal::models::ArchitectureConfig;
use uie_dal::scenes::procedural_scenes;
use uie_dal::training::{LabeledSample, SampleSet, TrainData};

/// Small U-Net that still has every moving part.
pub fn small_arch(size: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        height: size,
        width: size,
        base_channels: 4,
        levels: 2,
        latent_channels: 8,
        classifier_widths: vec![8, 8],
        num_classes: 6,
        leaky_slope: 0.2,
    }
}

/// Procedural scenes degraded under every water type, one draw each.
pub fn toy_samples(scenes: usize, size: usize, seed: u64) -> Vec<LabeledSample> {
    let scenes = procedural_scenes(scenes, seed, size, size).unwrap();
    let table = CoefficientTable::<f32>::parse(BUNDLED_COEFFICIENTS).unwrap();
    let out = synthesize_dataset(&scenes, table.specs(), 1, seed, &SynthesisRanges::default()).unwrap();
    out.iter()
        .map(|d| {
            let clear = scenes.iter().find(|s| s.scene_id() == d.scene_id).unwrap().clear();
            LabeledSample {
                degraded: d.degraded.to_planar(),
                clear: clear.to_planar(),
                class_id: d.class_id,
                scene_id: d.scene_id.clone(),
            }
        })
        .collect()
}

pub fn toy_set(scenes: usize, size: usize, seed: u64) -> SampleSet {
    SampleSet::new(size, size, toy_samples(scenes, size, seed)).unwrap()
}

/// Train on the first `train_scenes` scenes, validate on the rest.
pub fn toy_data(train_scenes: usize, val_scenes: usize, size: usize, seed: u64) -> TrainData {
    let all = toy_samples(train_scenes + val_scenes, size, seed);
    let (tr, va) = all.split_at(train_scenes * 6);
    TrainData {
        train: SampleSet::new(size, size, tr.to_vec()).unwrap(),
        val: SampleSet::new(size, size, va.to_vec()).unwrap(),
    }
}

/// Direct 2-D weighted-window SSIM with centered second moments.
pub fn ssim_reference(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let (h, w) = (a.height(), a.width());
    let luma = |img: &Image<f64>, y: usize, x: usize| {
        0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
    };
    let mut win = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += win[i][j] / z * luma(a, y0 + i, x0 + j);
                    mb += win[i][j] / z * luma(b, y0 + i, x0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let da = luma(a, y0 + i, x0 + j) - ma;
                    let db = luma(b, y0 + i, x0 + j) - mb;
                    va += win[i][j] / z * da * da;
                    vb += win[i][j] / z * db * db;
                    cov += win[i][j] / z * da * db;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
