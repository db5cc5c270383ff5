use std::path::{Path, PathBuf};

use serde_json::json;

use super::ImportanceMap;
use crate::error::Result;
use crate::fsutil::write_atomic;

/// Plain PGM (P2) bytes: values are mapped linearly from `[min, max]` of
/// the map to `0..=255` and rounded; a constant map becomes all zeros.
/// Returns the bytes with the `(min, max)` used.
pub fn pgm_bytes(map: &ImportanceMap) -> (Vec<u8>, f64, f64) {
    let v = map.values().data();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (h, w) = (map.height(), map.width());
    let mut text = format!("P2\n{w} {h}\n255\n");
    for row in v.chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&x| {
                let level = if max > min { ((x - min) / (max - min) * 255.0).round() } else { 0.0 };
                (level as u8).to_string()
            })
            .collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    (text.into_bytes(), min, max)
}

/// Writes the map as a PGM file.
pub fn write_pgm(map: &ImportanceMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &pgm_bytes(map).0)
}

/// Writes `path` as PGM and a sidecar `.json` next to it holding the
/// method, the min/max used for scaling and any flags. Returns the sidecar
/// path.
pub fn export_map(map: &ImportanceMap, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let (bytes, min, max) = pgm_bytes(map);
    let sidecar = path.with_extension("json");
    let meta = json!({
        "method": map.method(),
        "height": map.height(),
        "width": map.width(),
        "scaling": {"min": min, "max": max, "levels": 255},
        "orientation": "higher is more important",
        "flags": map.flags(),
    });
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar, &serde_json::to_vec_pretty(&meta)?)?;
    Ok(sidecar)
}
