use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::png::{read_rgb8, write_rgb8, write_scene_dir};
use super::{atomic_write, validate_scene_id};
use crate::error::{Error, Result};
use crate::formation::{DegradationParams, DegradedSample, SceneSample, NUM_WATER_TYPES};
use crate::training::{LabeledSample, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// 80/10/10 by `sha256(scene_id)` so every variant of a scene lands together.
pub fn split_for_scene(scene_id: &str) -> Split {
    let digest = Sha256::digest(scene_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    match u64::from_le_bytes(b) % 100 {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

/// One degraded image with its sources. Paths are relative to the
/// manifest's directory and use `/` separators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub degraded_path: String,
    pub clear_path: String,
    pub depth_path: String,
    pub class_id: usize,
    pub params: DegradationParams,
    pub scene_id: String,
    pub draw_index: usize,
    pub split: Split,
}

impl ManifestEntry {
    fn validate(&self) -> Result<()> {
        if self.class_id >= NUM_WATER_TYPES {
            return Err(Error::InvalidInput(format!(
                "class_id {} outside [0, 5]",
                self.class_id
            )));
        }
        self.params.validate()?;
        validate_scene_id(&self.scene_id)?;
        let expected = split_for_scene(&self.scene_id);
        if self.split != expected {
            return Err(Error::InvalidInput(format!(
                "scene {:?} belongs to split {expected}, not {}",
                self.scene_id, self.split
            )));
        }
        Ok(())
    }

    pub fn paths(&self) -> [&str; 3] {
        [&self.degraded_path, &self.clear_path, &self.depth_path]
    }
}

/// One JSON object per line, trailing newline.
pub fn render_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        e.validate()?;
        out.push_str(&serde_json::to_string(e).map_err(|err| Error::Format(err.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    atomic_write(path, render_manifest(entries)?.as_bytes())
}

/// Parse manifest text without touching the filesystem. Blank lines are
/// ignored; line numbers in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse { line: i + 1, detail };
        let e: ManifestEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        e.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(e);
    }
    Ok(out)
}

/// Every referenced file that does not exist under `root`, deduplicated.
pub fn check_references(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let missing: BTreeSet<PathBuf> = entries
        .iter()
        .flat_map(|e| e.paths())
        .map(|p| root.join(p))
        .filter(|p| !p.is_file())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::DanglingReference(missing.into_iter().collect()))
    }
}

fn base_dir(manifest: &Path) -> &Path {
    match manifest.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = parse_manifest(&text)?;
    check_references(base_dir(path), &entries)?;
    Ok(entries)
}

/// Write scenes, degraded variants and `manifest.jsonl` under `out`.
/// Degraded files are named `<scene>_c<class>_d<draw>.png`.
pub fn write_dataset(
    out: &Path,
    scenes: &[SceneSample<f32>],
    samples: &[DegradedSample<f32>],
) -> Result<Vec<ManifestEntry>> {
    write_scene_dir(out, scenes)?;
    let known: BTreeSet<&str> = scenes.iter().map(|s| s.scene_id()).collect();
    let entries: Vec<ManifestEntry> = samples
        .par_iter()
        .map(|s| {
            if !known.contains(s.scene_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "sample references unknown scene {:?}",
                    s.scene_id
                )));
            }
            let degraded_path = format!("degraded/{}_c{}_d{}.png", s.scene_id, s.class_id, s.draw_index);
            write_rgb8(&out.join(&degraded_path), &s.degraded)?;
            Ok(ManifestEntry {
                degraded_path,
                clear_path: format!("clear/{}.png", s.scene_id),
                depth_path: format!("depth/{}.png", s.scene_id),
                class_id: s.class_id,
                params: s.params,
                scene_id: s.scene_id.clone(),
                draw_index: s.draw_index,
                split: split_for_scene(&s.scene_id),
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Load the entries of `split` (or all when `None`) as planar training
/// samples, in manifest order.
pub fn load_samples(manifest: &Path, entries: &[ManifestEntry], split: Option<Split>) -> Result<SampleSet> {
    let root = base_dir(manifest);
    let chosen: Vec<&ManifestEntry> = entries.iter().filter(|e| split.is_none_or(|s| e.split == s)).collect();
    let clear_paths: BTreeSet<&str> = chosen.iter().map(|e| e.clear_path.as_str()).collect();
    let clear: HashMap<&str, Vec<f32>> = clear_paths
        .into_par_iter()
        .map(|p| Ok((p, read_rgb8(&root.join(p))?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|(p, img)| (p, img.to_planar()))
        .collect();
    let images: Vec<_> = chosen
        .par_iter()
        .map(|e| read_rgb8(&root.join(&e.degraded_path)))
        .collect::<Result<_>>()?;
    let (h, w) = match images.first() {
        Some(i) => (i.height(), i.width()),
        None => (0, 0),
    };
    let mut samples = Vec::with_capacity(chosen.len());
    for (e, img) in chosen.iter().zip(images) {
        if img.height() != h || img.width() != w {
            return Err(Error::shape(
                e.degraded_path.clone(),
                format!("{}x{} image in a {h}x{w} dataset", img.height(), img.width()),
            ));
        }
        let c = &clear[e.clear_path.as_str()];
        if c.len() != 3 * h * w {
            return Err(Error::shape(
                e.clear_path.clone(),
                "clear image size differs from degraded",
            ));
        }
        samples.push(LabeledSample {
            degraded: img.to_planar(),
            clear: c.clone(),
            class_id: e.class_id,
            scene_id: e.scene_id.clone(),
        });
    }
    SampleSet::new(h, w, samples)
}
