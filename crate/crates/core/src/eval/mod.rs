//! Metrics and evaluation sweeps.
//!
//! Visibility is defined from the noise mask alone: for a threshold `t`,
//! pixels with `B ≤ t` stay visible and all others are zeroed. The
//! fraction of visible pixels is reported as `percent_visible` in `[0, 1]`;
//! the occluded share is its complement.

mod bench;
mod sweep;

pub use bench::{format_benchmark_table, host_descriptor, runtime_benchmark, BenchmarkRecord};
pub use sweep::{
    choose_lambda, default_thresholds, dice_at_visibility, lambda_sweep, noise_masks, pretraining_comparison,
    visibility_sweep, write_csv, ComparisonRow, LambdaRow, MetricsRecord, SizeSpec,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::unet::{argmax_classes, ModelParams};

/// Dice overlap `2|P∩T| / (|P| + |T|)` of two binary masks.
///
/// Two empty masks score 1.0; exactly one empty mask scores 0.0.
pub fn dice(pred: &[u8], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "dice: masks have {} and {} pixels",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(target) {
        if a > 1 || b > 1 {
            return Err(Error::InvalidArgument(format!("dice needs binary masks, found {}", a.max(b))));
        }
        inter += (a & b) as usize;
        p += a as usize;
        t += b as usize;
    }
    Ok(if p + t == 0 { 1.0 } else { 2.0 * inter as f64 / (p + t) as f64 })
}

/// Zeroes every channel of pixels whose mask value exceeds `t`.
///
/// `x` is C×H×W and `mask` H×W. Returns the thresholded image and the
/// fraction of pixels with `mask ≤ t`.
pub fn threshold_visibility<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>, t: f64) -> Result<(Tensor<T>, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold must be in [0, 1], got {t}")));
    }
    let plane = mask.numel();
    if x.ndim() != 3 || mask.ndim() != 2 || x.shape()[1..] != *mask.shape() {
        return Err(Error::Shape(format!(
            "threshold_visibility: image {:?} with mask {:?}",
            x.shape(),
            mask.shape()
        )));
    }
    let keep: Vec<bool> = mask.data().iter().map(|b| b.as_f64() <= t).collect();
    let mut out = x.clone();
    for channel in out.data_mut().chunks_mut(plane) {
        for (v, &k) in channel.iter_mut().zip(&keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
    let visible = keep.iter().filter(|&&k| k).count();
    Ok((out, visible as f64 / plane as f64))
}

/// Maps class labels to a binary foreground mask (any non-zero class).
pub fn foreground(labels: &[u8]) -> Vec<u8> {
    labels.iter().map(|&l| (l != 0) as u8).collect()
}

/// Predicted class labels for an N×C×H×W batch, image-major.
pub fn segment(model: &ModelParams<f32>, images: &Tensor<f32>) -> Result<Vec<u8>> {
    Ok(argmax_classes(&model.predict(images)?))
}

/// Mean foreground dice of `model` over `dataset`, one image at a time in
/// chunks of `batch_size`.
pub fn validation_dice(model: &ModelParams<f32>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    mean_dice_with(dataset, batch_size, |images| segment(model, images))
}

/// Mean per-image foreground dice where `predict` labels each batch.
pub(crate) fn mean_dice_with(
    dataset: &Dataset,
    batch_size: usize,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Vec<u8>>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dice over an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = dataset.batch::<f32>(chunk)?;
        let labels = predict(&images)?;
        let plane = labels.len() / chunk.len();
        for (k, &i) in chunk.iter().enumerate() {
            let pred = foreground(&labels[k * plane..(k + 1) * plane]);
            total += dice(&pred, &foreground(dataset.samples[i].mask.labels()))?;
        }
    }
    Ok(total / dataset.len() as f64)
}
