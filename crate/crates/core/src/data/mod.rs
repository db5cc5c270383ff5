//! Samples, datasets, the synthetic landmark task and on-disk datasets.

mod io;
mod synthetic;

pub use io::{load_dataset, save_dataset, Manifest, ManifestSample, Normalization, MANIFEST_VERSION};
pub use synthetic::{generate_synthetic, SyntheticTaskSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Axis-aligned box, `[top, bottom) × [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom && x >= self.left && x < self.right
    }

    /// True when the boxes overlap after growing `self` by `gap` pixels.
    pub fn near(&self, other: &BBox, gap: usize) -> bool {
        self.top < other.bottom + gap
            && other.top < self.bottom + gap
            && self.left < other.right + gap
            && other.left < self.right + gap
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// Layout of a synthetic sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub landmark: BBox,
    pub target: BBox,
    pub distractors: Vec<BBox>,
}

/// H×W class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// One image with its ground-truth segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// C×H×W, values in [0, 1].
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub meta: Option<SampleMeta>,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            class_names: vec!["background".into(), "target".into()],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(C, H, W)` of the first sample.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| (s.channels(), s.height(), s.width()))
    }

    /// Stacks the selected samples into an N×C×H×W batch and flat targets.
    pub fn batch<T: crate::tensor::Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images: Vec<Tensor<T>> = indices.iter().map(|&i| self.samples[i].image.cast()).collect();
        let targets = indices
            .iter()
            .flat_map(|&i| self.samples[i].mask.labels().iter().map(|&l| l as usize))
            .collect();
        Ok((Tensor::stack(&images)?, targets))
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Deterministic shuffle-then-cut split into `(train, validation)`.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let cut = (n as f64 * train_fraction).round() as usize;
    if cut == 0 || cut == n {
        return Err(Error::InvalidArgument(format!(
            "fraction {train_fraction} of {n} samples leaves one side empty"
        )));
    }
    let order = permutation(n, &mut RngStream::new(seed));
    Ok((dataset.subset(&order[..cut]), dataset.subset(&order[cut..])))
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(n: usize, stream: &mut RngStream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, stream.range(0, i + 1));
    }
    order
}
