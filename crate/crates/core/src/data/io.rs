//! Dataset directories: `manifest.json` plus raw per-sample files.
//!
//! Images are row-major little-endian f32 (C×H×W), masks row-major u8
//! (H×W). When the manifest declares a normalization window `[lo, hi]`,
//! raw image values are mapped to `(v - lo) / (hi - lo)` and clamped to
//! `[0, 1]` on load; saved datasets are already normalized and declare the
//! identity window `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Mask, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub window: [f64; 2],
}

impl Normalization {
    pub fn identity() -> Self {
        Self { window: [0.0, 1.0] }
    }

    pub fn apply(&self, v: f32) -> f32 {
        let [lo, hi] = self.window;
        (((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub image: String,
    pub mask: String,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SampleMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub samples: Vec<ManifestSample>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
        _ => Error::Io(e),
    })
}

/// Loads the dataset described by `manifest_path`.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_slice(&read_file(manifest_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported manifest version {}, expected {MANIFEST_VERSION}",
            manifest.version
        )));
    }
    let [lo, hi] = manifest.normalization.window;
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("empty normalization window [{lo}, {hi}]")));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let [c, h, w] = entry.shape;
        let image_path = root.join(&entry.image);
        let raw = read_file(&image_path)?;
        if raw.len() != 4 * c * h * w {
            return Err(Error::Shape(format!(
                "{}: {} bytes, manifest shape {:?} needs {}",
                image_path.display(),
                raw.len(),
                entry.shape,
                4 * c * h * w
            )));
        }
        let pixels = raw
            .chunks_exact(4)
            .map(|b| manifest.normalization.apply(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let mask_path = root.join(&entry.mask);
        let labels = read_file(&mask_path)?;
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "{}: {} bytes, manifest shape {:?} needs {}",
                mask_path.display(),
                labels.len(),
                entry.shape,
                h * w
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidLabel { sample: entry.id, label });
        }
        samples.push(Sample {
            id: entry.id,
            image: Tensor::new([c, h, w], pixels)?,
            mask: Mask::new(h, w, labels)?,
            meta: entry.meta,
        });
    }
    Ok(Dataset {
        samples,
        class_names: manifest.class_names,
    })
}

/// Writes `dataset` under `dir` and returns the manifest path.
///
/// Files are written into a temporary sibling directory which is renamed
/// into place once complete; an existing `dir` is replaced.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let staging = crate::fsutil::temp_sibling(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(staging.join("images"))?;
    fs::create_dir_all(staging.join("masks"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let image = format!("images/{}.f32", s.id);
        let mask = format!("masks/{}.u8", s.id);
        let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(staging.join(&image), bytes)?;
        fs::write(staging.join(&mask), s.mask.labels())?;
        entries.push(ManifestSample {
            id: s.id.clone(),
            image,
            mask,
            shape: [s.channels(), s.height(), s.width()],
            meta: s.meta.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        class_names: dataset.class_names.clone(),
        normalization: Normalization::identity(),
        samples: entries,
    };
    write_atomic(&staging.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(dir.join("manifest.json"))
}
