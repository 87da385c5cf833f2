//! Underwater image formation: per-channel transmission, degradation,
//! algebraic inversion and seeded dataset synthesis.
//!
//! A clear radiance `I_c(x)` observed through water of a given type becomes
//! `U_c(x) = I_c(x) T_c(x) + B_c (1 - T_c(x))`, with transmission
//! `T_c(x) = N_c ^ d(x)` for the per-unit-depth residual energy ratio `N_c`.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::scalar::Scalar;

/// Number of merged water-type classes.
pub const NUM_WATER_TYPES: usize = 6;

/// Merged Jerlov classes, indexed by class id.
pub const WATER_TYPE_LABELS: [&str; NUM_WATER_TYPES] = ["1,3", "5", "7", "9", "I,IA,IB", "II,III"];

/// Default lower bound on transmission accepted by [`invert_degradation`].
pub const DEFAULT_T_MIN: f64 = 1e-3;

/// The bundled per-class N_c table, in [`CoefficientTable::parse`] format.
pub const BUNDLED_COEFFICIENTS: &str = include_str!("../data/jerlov_merged.txt");

/// Residual-energy coefficients for one merged water type.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterTypeSpec<T> {
    class_id: usize,
    n_coeff: [T; 3],
}

impl<T: Scalar> WaterTypeSpec<T> {
    pub fn new(class_id: usize, n_coeff: [T; 3]) -> Result<Self> {
        if class_id >= NUM_WATER_TYPES {
            return Err(Error::InvalidInput(format!(
                "water-type class id {class_id} out of range [0, {NUM_WATER_TYPES})"
            )));
        }
        for (c, n) in n_coeff.iter().enumerate() {
            if !(n.is_finite() && *n > T::zero() && *n <= T::one()) {
                return Err(Error::InvalidInput(format!(
                    "residual energy ratio for channel {c} must lie in (0, 1], got {n}"
                )));
            }
        }
        Ok(Self { class_id, n_coeff })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn label(&self) -> &'static str {
        WATER_TYPE_LABELS[self.class_id]
    }

    /// `N_c` in (r, g, b) order.
    pub fn n_coeff(&self) -> [T; 3] {
        self.n_coeff
    }

    /// Attenuation coefficients `beta_c` with `N_c = 10^(-beta_c)`.
    pub fn beta(&self) -> [T; 3] {
        self.n_coeff.map(|n| -n.log10())
    }
}

/// The six merged water types loaded from a coefficient table.
///
/// Text format, one class per line, `#` starts a comment:
///
/// ```text
/// <class_id> <label> <N_r> <N_g> <N_b>
/// ```
///
/// Labels must agree with [`WATER_TYPE_LABELS`] and every class must appear
/// exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable<T> {
    specs: Vec<WaterTypeSpec<T>>,
}

impl<T: Scalar> CoefficientTable<T> {
    pub fn parse(text: &str) -> Result<Self> {
        let mut slots: Vec<Option<WaterTypeSpec<T>>> = vec![None; NUM_WATER_TYPES];
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("expected 5 fields, found {}", fields.len()),
                });
            }
            let class_id: usize = fields[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                detail: format!("bad class id {:?}", fields[0]),
            })?;
            let expected = WATER_TYPE_LABELS.get(class_id).ok_or_else(|| Error::Parse {
                line: line_no,
                detail: format!("class id {class_id} out of range"),
            })?;
            if fields[1] != *expected {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("class {class_id} must be labelled {expected:?}, found {:?}", fields[1]),
                });
            }
            let mut n = [T::zero(); 3];
            for (c, f) in fields[2..].iter().enumerate() {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("bad coefficient {f:?}"),
                })?;
                n[c] = T::lit(v);
            }
            let spec = WaterTypeSpec::new(class_id, n).map_err(|e| Error::Parse {
                line: line_no,
                detail: e.to_string(),
            })?;
            if slots[class_id].replace(spec).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("class {class_id} listed twice"),
                });
            }
        }
        let missing: Vec<usize> = (0..NUM_WATER_TYPES).filter(|i| slots[*i].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "coefficient table is missing class id(s) {missing:?}"
            )));
        }
        Ok(Self {
            specs: slots.into_iter().flatten().collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn specs(&self) -> &[WaterTypeSpec<T>] {
        &self.specs
    }

    pub fn get(&self, class_id: usize) -> Option<&WaterTypeSpec<T>> {
        self.specs.get(class_id)
    }
}

/// A clear RGB image in `[0, 1]` paired with its depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample<T> {
    clear: Image<T>,
    depth: DepthMap<T>,
    scene_id: String,
}

impl<T: Scalar> SceneSample<T> {
    pub fn new(clear: Image<T>, depth: DepthMap<T>, scene_id: impl Into<String>) -> Result<Self> {
        if clear.channels() != 3 {
            return Err(Error::InvalidInput(format!(
                "clear image must have 3 channels, found {}",
                clear.channels()
            )));
        }
        if clear.height() != depth.height() || clear.width() != depth.width() {
            return Err(Error::InvalidInput(format!(
                "clear image is {}x{} but depth map is {}x{}",
                clear.height(),
                clear.width(),
                depth.height(),
                depth.width()
            )));
        }
        depth.validate()?;
        Ok(Self {
            clear,
            depth,
            scene_id: scene_id.into(),
        })
    }

    pub fn clear(&self) -> &Image<T> {
        &self.clear
    }

    pub fn depth(&self) -> &DepthMap<T> {
        &self.depth
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    /// Same scene with depth min-max normalized to `[0, 1]`.
    pub fn with_normalized_depth(&self) -> Self {
        Self {
            clear: self.clear.clone(),
            depth: self.depth.normalized(),
            scene_id: self.scene_id.clone(),
        }
    }
}

/// One random draw of background light and depth transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub background: [f64; 3],
    pub depth_scale: f64,
    pub depth_offset: f64,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if self
            .background
            .iter()
            .any(|b| !b.is_finite() || !(0.0..=1.0).contains(b))
        {
            return Err(Error::InvalidInput(format!(
                "background light {:?} outside [0, 1]",
                self.background
            )));
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "depth scale must be positive, got {}",
                self.depth_scale
            )));
        }
        if !(self.depth_offset.is_finite() && self.depth_offset >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "depth offset must be nonnegative, got {}",
                self.depth_offset
            )));
        }
        Ok(())
    }
}

/// A degraded rendering of a scene under one water type.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradedSample<T> {
    pub degraded: Image<T>,
    pub class_id: usize,
    pub params: DegradationParams,
    pub scene_id: String,
    pub draw_index: usize,
}

/// Inclusive sampling range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        let u: f64 = rng.gen();
        (self.lo + (self.hi - self.lo) * u).min(self.hi)
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Ranges for [`sample_degradation_params`]. The depth transform is applied to
/// per-scene depth already normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRanges {
    pub background: Range,
    pub depth_scale: Range,
    pub depth_offset: Range,
}

impl Default for SynthesisRanges {
    fn default() -> Self {
        Self {
            background: Range::new(0.1, 0.9),
            depth_scale: Range::new(0.5, 3.0),
            depth_offset: Range::new(0.0, 0.5),
        }
    }
}

impl SynthesisRanges {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, r: &Range, ok: &dyn Fn(f64) -> bool| {
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi {
                return Err(Error::Config(format!("{name} range {r} is not well ordered")));
            }
            if !ok(r.lo) || !ok(r.hi) {
                return Err(Error::Config(format!("{name} range {r} is out of domain")));
            }
            Ok(())
        };
        check("background", &self.background, &|v| (0.0..=1.0).contains(&v))?;
        check("depth_scale", &self.depth_scale, &|v| v > 0.0)?;
        check("depth_offset", &self.depth_offset, &|v| v >= 0.0)?;
        Ok(())
    }
}

/// `T_c(x) = N_c ^ d(x)` as a 3-channel map.
pub fn compute_transmission<T: Scalar>(spec: &WaterTypeSpec<T>, depth: &DepthMap<T>) -> Result<Image<T>> {
    depth.validate()?;
    let n = spec.n_coeff();
    let mut data = Vec::with_capacity(depth.data().len() * 3);
    for d in depth.data() {
        for nc in n {
            data.push(nc.powf(*d));
        }
    }
    Image::new(depth.height(), depth.width(), 3, data)
}

/// Render `scene` as seen through water of type `spec` under `params`.
pub fn degrade_image<T: Scalar>(
    scene: &SceneSample<T>,
    spec: &WaterTypeSpec<T>,
    params: &DegradationParams,
    draw_index: usize,
) -> Result<DegradedSample<T>> {
    params.validate()?;
    let clear = scene.clear();
    let depth = scene.depth();
    if clear.height() != depth.height() || clear.width() != depth.width() {
        return Err(Error::InvalidInput("clear image and depth map differ in size".into()));
    }
    let effective = depth.affine(T::lit(params.depth_scale), T::lit(params.depth_offset));
    let transmission = compute_transmission(spec, &effective)?;
    let background = params.background.map(T::lit);
    let mut out = clear.clone();
    for (i, (u, t)) in out.data_mut().iter_mut().zip(transmission.data()).enumerate() {
        let b = background[i % 3];
        let src = *u;
        let v = src * *t + b * (T::one() - *t);
        // exact value is a convex combination of src and b
        *u = v.max(src.min(b)).min(src.max(b));
    }
    Ok(DegradedSample {
        degraded: out,
        class_id: spec.class_id(),
        params: *params,
        scene_id: scene.scene_id().to_string(),
        draw_index,
    })
}

/// Solve the formation model for the clear image:
/// `I_c = (U_c - B_c (1 - T_c)) / T_c`.
pub fn invert_degradation<T: Scalar>(
    degraded: &Image<T>,
    spec: &WaterTypeSpec<T>,
    params: &DegradationParams,
    depth: &DepthMap<T>,
    t_min: T,
) -> Result<Image<T>> {
    params.validate()?;
    if degraded.height() != depth.height() || degraded.width() != depth.width() || degraded.channels() != 3 {
        return Err(Error::InvalidInput(
            "degraded image and depth map differ in size".into(),
        ));
    }
    let effective = depth.affine(T::lit(params.depth_scale), T::lit(params.depth_offset));
    let transmission = compute_transmission(spec, &effective)?;
    let below = transmission.data().iter().filter(|t| **t < t_min).count();
    if below > 0 {
        return Err(Error::IllConditioned {
            count: below,
            t_min: t_min.as_f64(),
        });
    }
    let background = params.background.map(T::lit);
    let mut out = degraded.clone();
    for (i, (u, t)) in out.data_mut().iter_mut().zip(transmission.data()).enumerate() {
        let b = background[i % 3];
        *u = (*u - b * (T::one() - *t)) / *t;
    }
    Ok(out)
}

/// Draw background light and depth transform. Consumes exactly five uniforms
/// in the order `B_r, B_g, B_b, scale, offset`.
pub fn sample_degradation_params(rng: &mut impl Rng, ranges: &SynthesisRanges) -> Result<DegradationParams> {
    ranges.validate()?;
    let background = [
        ranges.background.sample(rng),
        ranges.background.sample(rng),
        ranges.background.sample(rng),
    ];
    let depth_scale = ranges.depth_scale.sample(rng);
    let depth_offset = ranges.depth_offset.sample(rng);
    Ok(DegradationParams {
        background,
        depth_scale,
        depth_offset,
    })
}

/// Stable 64-bit seed from a master seed and string/integer keys.
pub fn derive_seed(master: u64, parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for one synthesized sample; independent of generation order.
pub fn sample_seed(master: u64, scene_id: &str, class_id: usize, draw_index: usize) -> u64 {
    derive_seed(
        master,
        &[
            b"synth",
            scene_id.as_bytes(),
            &(class_id as u64).to_le_bytes(),
            &(draw_index as u64).to_le_bytes(),
        ],
    )
}

/// Degrade every scene under every water type `draws_per_type` times.
///
/// Output order is scene, then class, then draw. Depth is min-max normalized
/// per scene before the sampled affine transform is applied.
pub fn synthesize_dataset<T: Scalar>(
    scenes: &[SceneSample<T>],
    specs: &[WaterTypeSpec<T>],
    draws_per_type: usize,
    seed: u64,
    ranges: &SynthesisRanges,
) -> Result<Vec<DegradedSample<T>>> {
    if scenes.is_empty() {
        return Err(Error::Config("no scenes to synthesize from".into()));
    }
    if draws_per_type == 0 {
        return Err(Error::Config("draws per water type must be at least 1".into()));
    }
    if specs.len() != NUM_WATER_TYPES || specs.iter().enumerate().any(|(i, s)| s.class_id() != i) {
        return Err(Error::Config(format!(
            "expected the {NUM_WATER_TYPES} water types in class-id order"
        )));
    }
    ranges.validate()?;
    let normalized: Vec<SceneSample<T>> = scenes.iter().map(|s| s.with_normalized_depth()).collect();
    let per_scene = NUM_WATER_TYPES * draws_per_type;
    (0..scenes.len() * per_scene)
        .into_par_iter()
        .map(|idx| {
            let scene = &normalized[idx / per_scene];
            let class_id = (idx % per_scene) / draws_per_type;
            let draw = idx % draws_per_type;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, scene.scene_id(), class_id, draw));
            let params = sample_degradation_params(&mut rng, ranges)?;
            degrade_image(scene, &specs[class_id], &params, draw)
        })
        .collect()
}
