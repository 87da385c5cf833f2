//! SSIM and PSNR, and per-water-type aggregation of both.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formation::WATER_TYPE_LABELS;
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SsimMode {
    /// BT.601 luma of RGB inputs.
    Luma,
    /// Mean of the per-channel scores.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub mode: SsimMode,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            mode: SsimMode::Luma,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Sum in a fixed binary-tree order so the result does not depend on how
/// the terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

fn check_same(a: &Image<f64>, b: &Image<f64>) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::InvalidInput(format!(
            "image dimensions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    check_same(a, b)?;
    let sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(mean(&sq))
}

/// `10 log10(max_val^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image<f64>, b: &Image<f64>, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::InvalidInput(format!("max_val must be positive, got {max_val}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP_DB))
}

/// Valid-mode separable filtering of a single-channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut horiz = vec![0.0; h * wo];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            horiz[y * wo + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * horiz[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
    let taps = cfg.taps();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect() };
    let (mu_a, _, _) = filter_valid(a, h, w, &taps);
    let (mu_b, _, _) = filter_valid(b, h, w, &taps);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let map: Vec<f64> = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = aa[i] - ma * ma;
            let var_b = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let num = (ma * mb + ma * mb + c1) * (cov + cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            num / den
        })
        .collect();
    mean(&map)
}

/// Mean structural similarity with the default configuration (luma,
/// 11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, range 1).
pub fn ssim(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with(a: &Image<f64>, b: &Image<f64>, cfg: &SsimConfig) -> Result<f64> {
    check_same(a, b)?;
    if a.height() < cfg.window || a.width() < cfg.window {
        return Err(Error::InvalidInput(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            a.height(),
            a.width(),
            cfg.window,
            cfg.window
        )));
    }
    let (h, w) = (a.height(), a.width());
    match cfg.mode {
        SsimMode::Luma => {
            let (la, lb) = (a.luma(), b.luma());
            Ok(ssim_plane(la.data(), lb.data(), h, w, cfg))
        }
        SsimMode::PerChannel => {
            let scores: Vec<f64> = (0..a.channels())
                .map(|c| ssim_plane(a.channel(c).data(), b.channel(c).data(), h, w, cfg))
                .collect();
            Ok(mean(&scores))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub label: String,
    pub n: usize,
    pub ssim_mean: f64,
    pub psnr_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Classes present in the input, ascending by class id.
    pub per_class: Vec<ClassMetrics>,
    pub n: usize,
    pub ssim_mean: f64,
    pub psnr_mean: f64,
}

/// One evaluated pair: model output, ground truth, water-type class.
pub struct EvalPair<'a> {
    pub output: &'a Image<f64>,
    pub truth: &'a Image<f64>,
    pub class_id: usize,
}

fn class_label(class_id: usize) -> String {
    WATER_TYPE_LABELS
        .get(class_id)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class_id}"))
}

/// Arithmetic means of SSIM and PSNR (max value 1) within each class and
/// over all pairs.
pub fn aggregate_by_class(pairs: &[EvalPair<'_>], ssim_cfg: &SsimConfig) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to aggregate".into()));
    }
    let scores: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|p| Ok((ssim_with(p.output, p.truth, ssim_cfg)?, psnr(p.output, p.truth, 1.0)?)))
        .collect::<Result<_>>()?;
    aggregate_scores(&pairs.iter().map(|p| p.class_id).collect::<Vec<_>>(), &scores)
}

/// Aggregate precomputed `(ssim, psnr)` scores by class.
pub fn aggregate_scores(class_ids: &[usize], scores: &[(f64, f64)]) -> Result<MetricReport> {
    if scores.is_empty() || class_ids.len() != scores.len() {
        return Err(Error::Config("no pairs to aggregate".into()));
    }
    let max_class = class_ids.iter().copied().max().unwrap_or(0);
    let mut per_class = Vec::new();
    for c in 0..=max_class {
        let (s, p): (Vec<f64>, Vec<f64>) = class_ids
            .iter()
            .zip(scores)
            .filter(|(id, _)| **id == c)
            .map(|(_, sp)| *sp)
            .unzip();
        if s.is_empty() {
            continue;
        }
        per_class.push(ClassMetrics {
            class_id: c,
            label: class_label(c),
            n: s.len(),
            ssim_mean: mean(&s),
            psnr_mean: mean(&p),
        });
    }
    let (s, p): (Vec<f64>, Vec<f64>) = scores.iter().copied().unzip();
    Ok(MetricReport {
        per_class,
        n: scores.len(),
        ssim_mean: mean(&s),
        psnr_mean: mean(&p),
    })
}

impl MetricReport {
    /// CSV with header `class,n,ssim_mean,psnr_mean`; the last row (`all`)
    /// holds the overall means.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "class,n,ssim_mean,psnr_mean")?;
        for c in &self.per_class {
            writeln!(out, "\"{}\",{},{:.6},{:.4}", c.label, c.n, c.ssim_mean, c.psnr_mean)?;
        }
        writeln!(out, "all,{},{:.6},{:.4}", self.n, self.ssim_mean, self.psnr_mean)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>6} {:>9} {:>10}", "water", "n", "SSIM", "PSNR (dB)")?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<10} {:>6} {:>9.4} {:>10.3}",
                c.label, c.n, c.ssim_mean, c.psnr_mean
            )?;
        }
        write!(
            f,
            "{:<10} {:>6} {:>9.4} {:>10.3}",
            "all", self.n, self.ssim_mean, self.psnr_mean
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image<f64> {
        Image::from_fn(h, w, 3, |y, x, _| f(y, x))
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = gray(4, 4, |y, x| (y * 4 + x) as f64 / 16.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_hand_value() {
        let a = Image::filled(4, 4, 3, 0.5);
        let b = Image::filled(4, 4, 3, 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_mismatch() {
        let a = Image::filled(4, 4, 3, 0.5);
        let b = Image::filled(4, 5, 3, 0.5);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = gray(16, 16, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image::filled(12, 12, 3, 0.0);
        let b = Image::filled(12, 12, 3, 1.0);
        let c1 = 1e-4;
        assert!((ssim(&a, &b).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(10, 20, 3, 0.5);
        assert!(matches!(ssim(&a, &a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn aggregate_two_classes() {
        let scores = [(1.0, 100.0), (0.5, 20.0)];
        let r = aggregate_scores(&[0, 3], &scores).unwrap();
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.per_class[1].label, "9");
        assert!((r.ssim_mean - 0.75).abs() < 1e-15);
        assert_eq!(r.per_class.iter().map(|c| c.n).sum::<usize>(), 2);
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(matches!(
            aggregate_by_class(&[], &SsimConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let r = aggregate_scores(&[4, 4], &[(1.0, 100.0), (1.0, 100.0)]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "class,n,ssim_mean,psnr_mean\n\"I,IA,IB\",2,1.000000,100.0000\nall,2,1.000000,100.0000\n"
        );
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
