use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use super::{atomic_write, validate_scene_id};
use crate::error::{Error, Result};
use crate::formation::SceneSample;
use crate::image::{DepthMap, Image};

/// Depth PNGs store millimetres.
const DEPTH_UNITS_PER_METRE: f32 = 1000.0;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn encode(path: &Path, img: DynamicImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    atomic_write(path, &bytes)
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::DanglingReference(vec![path.to_path_buf()]));
    }
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Quantise a 3-channel image in `[0, 1]` to 8-bit RGB.
pub fn write_rgb8(path: &Path, img: &Image<f32>) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3 channels, got {}",
            img.channels()
        )));
    }
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    encode(path, DynamicImage::ImageRgb8(buf))
}

/// Any PNG, converted to RGB and scaled to `[0, 1]`.
pub fn read_rgb8(path: &Path) -> Result<Image<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data)
}

/// 16-bit grayscale in millimetres; depths beyond 65.535 m are rejected.
pub fn write_depth16(path: &Path, depth: &DepthMap<f32>) -> Result<()> {
    depth.validate()?;
    let mut raw = Vec::with_capacity(depth.data().len());
    for d in depth.data() {
        let v = (d * DEPTH_UNITS_PER_METRE).round();
        if v > u16::MAX as f32 {
            return Err(Error::InvalidInput(format!("depth {d} m exceeds the 16-bit range")));
        }
        raw.push(v as u16);
    }
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    encode(path, DynamicImage::ImageLuma16(buf))
}

pub fn read_depth16(path: &Path) -> Result<DepthMap<f32>> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / DEPTH_UNITS_PER_METRE)
        .collect();
    DepthMap::new(h as usize, w as usize, data)
}

/// Scenes live as `clear/<id>.png` plus `depth/<id>.png`.
pub fn write_scene_dir(dir: &Path, scenes: &[SceneSample<f32>]) -> Result<()> {
    for s in scenes {
        validate_scene_id(s.scene_id())?;
        write_rgb8(&dir.join("clear").join(format!("{}.png", s.scene_id())), s.clear())?;
        write_depth16(&dir.join("depth").join(format!("{}.png", s.scene_id())), s.depth())?;
    }
    Ok(())
}

/// Load every scene under `dir`, sorted by id. A clear image without a
/// matching depth map is a dangling reference.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<SceneSample<f32>>> {
    let clear_dir = dir.join("clear");
    let rd = std::fs::read_dir(&clear_dir).map_err(|e| Error::io(&clear_dir, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(&clear_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let missing: Vec<_> = ids
        .iter()
        .map(|id| dir.join("depth").join(format!("{id}.png")))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::DanglingReference(missing));
    }
    ids.iter()
        .map(|id| {
            validate_scene_id(id)?;
            let clear = read_rgb8(&clear_dir.join(format!("{id}.png")))?;
            let depth = read_depth16(&dir.join("depth").join(format!("{id}.png")))?;
            SceneSample::new(clear, depth, id.as_str())
        })
        .collect()
}
