use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{foreground, dice, segment, threshold_visibility, validation_dice};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::interpret::noise_logits;
use crate::tensor::{sigmoid, Tensor};
use crate::training::{noised_validation, train_unoise, NoiseTrainConfig, TrainOutputs};
use crate::unet::{ModelParams, Provenance, UNetConfig};

/// One point of a visibility sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model: String,
    pub pretrained: bool,
    pub threshold: f64,
    /// Mean fraction of pixels with `B ≤ threshold`.
    pub percent_visible: f64,
    /// Mean foreground dice against the ground truth.
    pub dice: f64,
}

/// `0.00, 0.05, …, 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Noise masks `B` (H×W) of every image in `dataset`.
pub fn noise_masks(noise: &ModelParams<f32>, dataset: &Dataset, batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut masks = Vec::with_capacity(dataset.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = dataset.batch::<f32>(chunk)?;
        let logits = noise_logits(noise, &images)?;
        for k in 0..chunk.len() {
            masks.push(logits.index_outer(k).map(sigmoid));
        }
    }
    Ok(masks)
}

fn model_tag(noise: &ModelParams<f32>) -> (String, bool) {
    let c = noise.config();
    (
        format!("depth{}-base{}", c.depth, c.base_channels),
        noise.provenance() == Provenance::PretrainedSegmentation,
    )
}

/// Mean percent visible and mean dice with every image thresholded at `t`.
fn dice_under_threshold(
    utility: &ModelParams<f32>,
    dataset: &Dataset,
    masks: &[Tensor<f32>],
    t: f64,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let (mut visible, mut total) = (0.0, 0.0);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut images = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (img, pv) = threshold_visibility(&dataset.samples[i].image, &masks[i], t)?;
            visible += pv;
            images.push(img);
        }
        let labels = segment(utility, &Tensor::stack(&images)?)?;
        let plane = labels.len() / chunk.len();
        for (k, &i) in chunk.iter().enumerate() {
            let pred = foreground(&labels[k * plane..(k + 1) * plane]);
            total += dice(&pred, &foreground(dataset.samples[i].mask.labels()))?;
        }
    }
    let n = dataset.len() as f64;
    Ok((visible / n, total / n))
}

/// Dice of `utility` on images thresholded by the masks of `noise`.
///
/// Thresholds are sorted, deduplicated and always include 1.0, the
/// unmasked reference.
pub fn visibility_sweep(
    utility: &ModelParams<f32>,
    noise: &ModelParams<f32>,
    dataset: &Dataset,
    thresholds: &[f64],
    batch_size: usize,
) -> Result<Vec<MetricsRecord>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("visibility sweep over an empty dataset".into()));
    }
    let mut ts = thresholds.to_vec();
    ts.push(1.0);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let masks = noise_masks(noise, dataset, batch_size)?;
    let (model, pretrained) = model_tag(noise);
    ts.into_iter()
        .map(|t| {
            let (percent_visible, dice) = dice_under_threshold(utility, dataset, &masks, t, batch_size)?;
            Ok(MetricsRecord {
                model: model.clone(),
                pretrained,
                threshold: t,
                percent_visible,
                dice,
            })
        })
        .collect()
}

/// Dice at the threshold whose mean percent visible is closest to `target`.
///
/// Candidate thresholds are 2001 quantiles of all mask values pooled over
/// the dataset, plus 0 and 1; ties go to the smaller threshold.
pub fn dice_at_visibility(
    utility: &ModelParams<f32>,
    noise: &ModelParams<f32>,
    dataset: &Dataset,
    target: f64,
    batch_size: usize,
) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("visibility search over an empty dataset".into()));
    }
    let masks = noise_masks(noise, dataset, batch_size)?;
    let sorted: Vec<Vec<f32>> = masks
        .iter()
        .map(|m| {
            let mut v = m.data().to_vec();
            v.sort_by(f32::total_cmp);
            v
        })
        .collect();
    let mut pooled: Vec<f32> = sorted.iter().flatten().copied().collect();
    pooled.sort_by(f32::total_cmp);
    const LEVELS: usize = 2000;
    let mut candidates: Vec<f64> = (0..=LEVELS)
        .map(|i| pooled[i * (pooled.len() - 1) / LEVELS] as f64)
        .collect();
    candidates.extend([0.0, 1.0]);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mean_visible = |t: f64| {
        sorted
            .iter()
            .map(|v| v.partition_point(|&b| b as f64 <= t) as f64 / v.len() as f64)
            .sum::<f64>()
            / sorted.len() as f64
    };
    let mut best = (f64::INFINITY, 0.0);
    for &t in &candidates {
        let gap = (mean_visible(t) - target).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    let t = best.1;
    let (percent_visible, dice) = dice_under_threshold(utility, dataset, &masks, t, batch_size)?;
    let (model, pretrained) = model_tag(noise);
    Ok(MetricsRecord {
        model,
        pretrained,
        threshold: t,
        percent_visible,
        dice,
    })
}

/// A named noise-model architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSpec {
    pub name: String,
    pub config: UNetConfig,
}

/// One cell of the pretraining comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub size: String,
    pub pretrained: bool,
    pub threshold: f64,
    pub percent_visible: f64,
    pub dice: f64,
}

impl ComparisonRow {
    pub fn from_record(size: &str, record: MetricsRecord) -> Self {
        Self {
            size: size.to_string(),
            pretrained: record.pretrained,
            threshold: record.threshold,
            percent_visible: record.percent_visible,
            dice: record.dice,
        }
    }
}

/// Trains each size with and without pretraining and reports dice at about
/// 50% visibility on `val`, in the order (size, not pretrained), (size,
/// pretrained).
pub fn pretraining_comparison(
    train: &Dataset,
    val: &Dataset,
    utility: &ModelParams<f32>,
    sizes: &[SizeSpec],
    cfg: &NoiseTrainConfig,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(2 * sizes.len());
    for size in sizes {
        for pretrain in [false, true] {
            let run_cfg = NoiseTrainConfig {
                pretrain,
                ..cfg.clone()
            };
            let trained = train_unoise(train, val, utility, size.config, &run_cfg, &TrainOutputs::default())?;
            let record = dice_at_visibility(utility, &trained.model, val, 0.5, cfg.batch_size)?;
            rows.push(ComparisonRow::from_record(&size.name, record));
        }
    }
    Ok(rows)
}

/// Outcome of training one noise model at a given λ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    #[serde(rename = "mean_B")]
    pub mean_b: f64,
    pub noised_dice: f64,
    pub clean_dice: f64,
}

/// Trains one noise model per λ and measures it on `val`.
pub fn lambda_sweep(
    train: &Dataset,
    val: &Dataset,
    utility: &ModelParams<f32>,
    noise_config: UNetConfig,
    base: &NoiseTrainConfig,
    lambdas: &[f64],
) -> Result<Vec<LambdaRow>> {
    let clean_dice = validation_dice(utility, val, base.batch_size)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = NoiseTrainConfig {
                lambda,
                ..base.clone()
            };
            let trained = train_unoise(train, val, utility, noise_config, &cfg, &TrainOutputs::default())?;
            let (mean_b, noised_dice) = noised_validation(&trained.model, utility, val, &cfg)?;
            Ok(LambdaRow {
                lambda,
                mean_b,
                noised_dice,
                clean_dice,
            })
        })
        .collect()
}

/// Largest λ whose noised dice stays within `max_relative_drop` of the
/// clean dice.
pub fn choose_lambda(rows: &[LambdaRow], max_relative_drop: f64) -> Option<f64> {
    rows.iter()
        .filter(|r| r.noised_dice >= (1.0 - max_relative_drop) * r.clean_dice)
        .map(|r| r.lambda)
        .max_by(f64::total_cmp)
}

/// Writes rows as CSV with a header taken from the field names.
pub fn write_csv<R: Serialize>(rows: &[R], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path.as_ref(), &bytes)
}
