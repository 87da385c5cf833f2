//! On-disk formats: JSON-lines manifests, PNG images and binary checkpoints.

mod checkpoint;
mod manifest;
mod png;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC,
};
pub use manifest::{
    check_references, load_samples, parse_manifest, read_manifest, render_manifest, split_for_scene, write_dataset,
    write_manifest, ManifestEntry, Split,
};
pub use png::{read_depth16, read_rgb8, read_scene_dir, write_depth16, write_rgb8, write_scene_dir};

use crate::error::{Error, Result};

/// Write `bytes` to a temporary file beside `path`, then rename it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Scene ids become file names, so keep them to a portable alphabet.
pub fn validate_scene_id(id: &str) -> Result<()> {
    if id.is_empty()
        || id.starts_with('.')
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
    {
        return Err(Error::InvalidInput(format!(
            "scene id {id:?} must be nonempty and use only [A-Za-z0-9_.-]"
        )));
    }
    Ok(())
}
