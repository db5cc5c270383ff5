//! Context-dependent synthetic segmentation task.
//!
//! Each image holds one landmark (a hollow square) and `1 + n_distractors`
//! identical discs. Exactly one disc, the one sitting at `offset` from the
//! landmark centre, is the target. Target and distractor centres are drawn
//! from the same region, so a disc's appearance and position alone say
//! nothing about which one is the target: the landmark is required.

use serde::{Deserialize, Serialize};

use super::{BBox, Dataset, Mask, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub image_size: usize,
    pub n_distractors: usize,
    /// Outer side of the square landmark.
    pub landmark_size: usize,
    pub landmark_thickness: usize,
    pub landmark_intensity: f32,
    /// Radius of target and distractor discs.
    pub blob_radius: usize,
    pub blob_intensity: f32,
    /// `(dy, dx)` from landmark centre to target centre.
    pub offset: (isize, isize),
    pub background_level: f32,
    /// Standard deviation of additive pixel noise.
    pub noise_level: f32,
    /// Minimum empty pixels between any two shapes.
    pub gap: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_distractors: 3,
            landmark_size: 10,
            landmark_thickness: 2,
            landmark_intensity: 0.45,
            blob_radius: 4,
            blob_intensity: 0.85,
            offset: (0, 14),
            background_level: 0.15,
            noise_level: 0.05,
            gap: 2,
        }
    }
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        if self.landmark_thickness == 0 || 2 * self.landmark_thickness >= self.landmark_size {
            return bad("landmark must be a hollow square: 0 < 2·thickness < size");
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise_level must be non-negative");
        }
        Ok(())
    }

    fn blob_box(&self, cy: usize, cx: usize) -> BBox {
        let r = self.blob_radius;
        BBox {
            top: cy - r,
            left: cx - r,
            bottom: cy + r + 1,
            right: cx + r + 1,
        }
    }

    fn landmark_box(&self, ty: usize, tx: usize) -> Option<BBox> {
        let cy = ty as isize - self.offset.0;
        let cx = tx as isize - self.offset.1;
        let half = (self.landmark_size / 2) as isize;
        let (top, left) = (cy - half, cx - half);
        let n = self.image_size as isize;
        let size = self.landmark_size as isize;
        (top >= 0 && left >= 0 && top + size <= n && left + size <= n).then(|| BBox {
            top: top as usize,
            left: left as usize,
            bottom: (top + size) as usize,
            right: (left + size) as usize,
        })
    }

    /// Disc centres whose disc fits and whose implied landmark fits.
    fn centre_region(&self) -> Vec<(usize, usize)> {
        let r = self.blob_radius;
        let n = self.image_size;
        let mut region = Vec::new();
        if 2 * r + 1 > n {
            return region;
        }
        for y in r..n - r {
            for x in r..n - r {
                if let Some(lm) = self.landmark_box(y, x) {
                    if !lm.near(&self.blob_box(y, x), self.gap) {
                        region.push((y, x));
                    }
                }
            }
        }
        region
    }
}

/// Generates `n` samples deterministically from `seed`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    spec.validate()?;
    let region = spec.centre_region();
    if region.is_empty() {
        return Err(Error::Placement(format!(
            "no position fits a radius-{} disc with its landmark at offset {:?} in {}×{}",
            spec.blob_radius, spec.offset, spec.image_size, spec.image_size
        )));
    }
    let width = (n - 1).to_string().len().max(4);
    let root = RngStream::new(seed);
    (0..n)
        .map(|i| generate_one(spec, &region, &mut root.substream(i as u64), format!("{i:0width$}")))
        .collect::<Result<Vec<_>>>()
        .map(Dataset::new)
}

fn generate_one(spec: &SyntheticTaskSpec, region: &[(usize, usize)], rng: &mut RngStream, id: String) -> Result<Sample> {
    let pick = |rng: &mut RngStream| region[rng.range(0, region.len())];
    let (ty, tx) = pick(rng);
    let target = spec.blob_box(ty, tx);
    let landmark = spec.landmark_box(ty, tx).expect("region guarantees landmark fits");

    let mut distractors: Vec<BBox> = Vec::with_capacity(spec.n_distractors);
    let mut centres = Vec::with_capacity(spec.n_distractors);
    let mut attempts = 0;
    while distractors.len() < spec.n_distractors {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Placement(format!(
                "could not place {} non-overlapping distractors in {}×{}",
                spec.n_distractors, spec.image_size, spec.image_size
            )));
        }
        let (y, x) = pick(rng);
        let b = spec.blob_box(y, x);
        let clash = b.near(&landmark, spec.gap)
            || b.near(&target, spec.gap)
            || distractors.iter().any(|d| b.near(d, spec.gap));
        if !clash {
            distractors.push(b);
            centres.push((y, x));
        }
    }

    let size = spec.image_size;
    let mut pixels = vec![spec.background_level; size * size];
    let r2 = (spec.blob_radius * spec.blob_radius) as isize;
    let mut mask = Mask::zeros(size, size);
    let disc = |cy: usize, cx: usize, y: usize, x: usize| {
        let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
        dy * dy + dx * dx <= r2
    };
    for y in landmark.top..landmark.bottom {
        for x in landmark.left..landmark.right {
            let t = spec.landmark_thickness;
            let inner = y >= landmark.top + t && y < landmark.bottom - t && x >= landmark.left + t && x < landmark.right - t;
            if !inner {
                pixels[y * size + x] = spec.landmark_intensity;
            }
        }
    }
    for &(cy, cx) in std::iter::once(&(ty, tx)).chain(&centres) {
        let b = spec.blob_box(cy, cx);
        for y in b.top..b.bottom {
            for x in b.left..b.right {
                if disc(cy, cx, y, x) {
                    pixels[y * size + x] = spec.blob_intensity;
                    if (cy, cx) == (ty, tx) {
                        mask.set(y, x, 1);
                    }
                }
            }
        }
    }
    if spec.noise_level > 0.0 {
        for p in &mut pixels {
            *p = (*p + spec.noise_level * rng.standard_normal() as f32).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        id,
        image: Tensor::new([1, size, size], pixels)?,
        mask,
        meta: Some(SampleMeta {
            landmark,
            target,
            distractors,
        }),
    })
}
