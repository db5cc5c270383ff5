//! Training of the utility segmentation model and of the U-Noise model.
//!
//! The noise model `N` maps an image to per-pixel logits; `B = sigmoid(N(x))`
//! scales Gaussian noise added to the image before the frozen utility model
//! `U` sees it:
//!
//! ```text
//! σ  = σ_min + B·(σ_max − σ_min)
//! x' = x + σ·ε,            ε ~ N(0, 1), one draw per pixel and step
//! L  = CE(U(x'), y) − λ·mean(log max(B, floor))
//! ```
//!
//! Only the parameters of `N` are updated. Large `B` means the pixel
//! tolerates noise and so matters little to `U`.

mod noise;
mod optim;

pub use noise::{
    apply_noise, noised_input, unoise_loss, unoise_loss_with_noise, unoise_objective, FrozenModel, LossTerms,
    NoiseTrainConfig, DEFAULT_LAMBDA,
};
pub use optim::{OptimConfig, OptimizerState};

use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{permutation, Dataset};
use crate::error::{Error, Result};
use crate::eval::{mean_dice_with, segment, validation_dice, write_csv};
use crate::tensor::{sigmoid, Graph, RngStream, Tensor};
use crate::unet::{build, save_checkpoint_with_metadata, Head, Metadata, ModelParams, Provenance, UNetConfig};

/// Minibatch schedule shared by the segmentation trainings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Utility model architecture plus its schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityTrainConfig {
    pub model: UNetConfig,
    #[serde(flatten)]
    pub schedule: Schedule,
}

impl Default for UtilityTrainConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::segmentation(3, 16, 1, 2),
            schedule: Schedule::default(),
        }
    }
}

/// Optional files written while training. Both are rewritten atomically at
/// the end of every epoch, so the checkpoint is always the last good state.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// One row of the utility training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: f64,
}

/// One row of the noise training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEpoch {
    pub epoch: usize,
    pub utility_loss: f64,
    pub noise_term: f64,
    #[serde(rename = "mean_B")]
    pub mean_b: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug)]
pub struct Trained<E> {
    pub model: ModelParams<f32>,
    pub history: Vec<E>,
}

impl Trained<UtilityEpoch> {
    /// Validation dice after the last epoch.
    pub fn val_dice(&self) -> Option<f64> {
        self.history.last().map(|e| e.val_dice)
    }
}

/// Trains a segmentation U-Net with softmax cross-entropy and Adam.
pub fn train_utility(
    train: &Dataset,
    val: &Dataset,
    cfg: &UtilityTrainConfig,
    out: &TrainOutputs,
) -> Result<Trained<UtilityEpoch>> {
    if cfg.model.head != Head::ClassLogits {
        return Err(Error::InvalidArgument("the utility model needs a class-logits head".into()));
    }
    let mut model = build::<f32>(cfg.model, cfg.schedule.seed)?;
    model.set_provenance(Provenance::UtilityCheckpoint);
    fit_segmentation(model, train, val, &cfg.schedule, out)
}

/// Trains the noise architecture on segmentation, then swaps in a fresh
/// single-channel head. Every other parameter keeps its trained value.
pub fn pretrain_noise_model(
    train: &Dataset,
    val: &Dataset,
    noise_config: UNetConfig,
    classes: usize,
    schedule: &Schedule,
) -> Result<ModelParams<f32>> {
    let seg = UNetConfig {
        head: Head::ClassLogits,
        out_channels: classes,
        ..noise_config
    };
    let trained = fit_segmentation(build(seg, schedule.seed)?, train, val, schedule, &TrainOutputs::default())?;
    let mut model = trained
        .model
        .with_new_head(Head::SingleChannelLogit, 1, schedule.seed.wrapping_add(1))?;
    model.set_provenance(Provenance::PretrainedSegmentation);
    Ok(model)
}

fn check_trainable(train: &Dataset, config: &UNetConfig) -> Result<()> {
    let (c, h, w) = train
        .image_shape()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    if c != config.in_channels {
        return Err(Error::Shape(format!(
            "images have {c} channels, model expects {}",
            config.in_channels
        )));
    }
    let div = config.spatial_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            divisor: div,
        });
    }
    Ok(())
}

fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = permutation(n, &mut RngStream::new(seed).substream(2 * epoch as u64));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn diverged(epoch: usize, step: usize, out: &TrainOutputs, saved: bool) -> Error {
    Error::Diverged {
        epoch,
        step,
        last_good: saved.then(|| out.checkpoint.clone()).flatten(),
    }
}

fn fit_segmentation(
    mut model: ModelParams<f32>,
    train: &Dataset,
    val: &Dataset,
    schedule: &Schedule,
    out: &TrainOutputs,
) -> Result<Trained<UtilityEpoch>> {
    check_trainable(train, model.config())?;
    let mut opt = OptimizerState::new(OptimConfig::with_lr(schedule.lr), &model);
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut total = 0.0;
        let batches = minibatches(train.len(), schedule.batch_size, schedule.seed, epoch);
        for (step, idx) in batches.iter().enumerate() {
            let (images, targets) = train.batch::<f32>(idx)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(images);
            let logits = model.forward(&mut g, &bound, x)?;
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(diverged(epoch, step, out, epoch > 0));
            }
            g.backward(loss)?;
            let grads = model.gradients(&g, &bound);
            opt.update(&mut model, &grads)?;
            total += value * idx.len() as f64;
        }
        let val_dice = if val.is_empty() {
            f64::NAN
        } else {
            validation_dice(&model, val, schedule.batch_size)?
        };
        let row = UtilityEpoch {
            epoch: epoch + 1,
            loss: total / train.len() as f64,
            val_dice,
        };
        info!("epoch {} loss {:.5} val dice {:.4}", row.epoch, row.loss, row.val_dice);
        history.push(row);
        if let Some(path) = &out.checkpoint {
            let mut meta = Metadata::new();
            meta.insert("epoch".into(), json!(row.epoch));
            meta.insert("val_dice".into(), json!(row.val_dice));
            meta.insert("schedule".into(), serde_json::to_value(schedule)?);
            save_checkpoint_with_metadata(&model, &meta, path)?;
        }
        if let Some(path) = &out.log {
            write_csv(&history, path)?;
        }
    }
    Ok(Trained { model, history })
}

/// Trains a U-Noise model against the frozen `utility`.
///
/// With `cfg.pretrain` the noise network first learns the segmentation task
/// itself (see [`pretrain_noise_model`]). Fails with
/// [`Error::FrozenModelModified`] if the utility parameters changed.
pub fn train_unoise(
    train: &Dataset,
    val: &Dataset,
    utility: &ModelParams<f32>,
    noise_config: UNetConfig,
    cfg: &NoiseTrainConfig,
    out: &TrainOutputs,
) -> Result<Trained<NoiseEpoch>> {
    cfg.validate()?;
    if noise_config.head != Head::SingleChannelLogit {
        return Err(Error::InvalidArgument("the noise model needs a single-channel-logit head".into()));
    }
    check_trainable(train, &noise_config)?;
    check_trainable(train, utility.config())?;
    let frozen = utility.digest();
    let mut model = if cfg.pretrain {
        let schedule = Schedule {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            epochs: cfg.pretrain_epochs,
            seed: cfg.seed,
        };
        pretrain_noise_model(train, val, noise_config, utility.config().out_channels, &schedule)?
    } else {
        build::<f32>(noise_config, cfg.seed)?
    };

    let mut opt = OptimizerState::new(OptimConfig::with_lr(cfg.lr), &model);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut noise_stream = RngStream::new(cfg.seed).substream(2 * epoch as u64 + 1);
        let (mut utility_sum, mut noise_sum) = (0.0, 0.0);
        let batches = minibatches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for (step, idx) in batches.iter().enumerate() {
            let (images, targets) = train.batch::<f32>(idx)?;
            let [n, _, h, w] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(images);
            let logits = model.forward(&mut g, &bound, x)?;
            let eps = g.constant(Tensor::randn([n, h, w], &mut noise_stream));
            let terms = unoise_objective(&mut g, utility, x, &targets, logits, eps, cfg)?;
            let total = g.value(terms.total).item() as f64;
            if !total.is_finite() {
                return Err(diverged(epoch, step, out, epoch > 0));
            }
            g.backward(terms.total)?;
            let grads = model.gradients(&g, &bound);
            opt.update(&mut model, &grads)?;
            utility_sum += g.value(terms.utility).item() as f64 * n as f64;
            noise_sum += g.value(terms.noise_term).item() as f64 * n as f64;
        }
        let (mean_b, val_dice) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            noised_validation(&model, utility, val, cfg)?
        };
        let row = NoiseEpoch {
            epoch: epoch + 1,
            utility_loss: utility_sum / train.len() as f64,
            noise_term: noise_sum / train.len() as f64,
            mean_b,
            val_dice,
        };
        info!(
            "epoch {} utility {:.5} noise {:.5} mean B {:.4} val dice {:.4}",
            row.epoch, row.utility_loss, row.noise_term, row.mean_b, row.val_dice
        );
        history.push(row);
        if let Some(path) = &out.checkpoint {
            let mut meta = Metadata::new();
            meta.insert("epoch".into(), json!(row.epoch));
            meta.insert("mean_B".into(), json!(row.mean_b));
            meta.insert("val_dice".into(), json!(row.val_dice));
            meta.insert("utility_digest".into(), json!(frozen));
            meta.insert("train_config".into(), serde_json::to_value(cfg)?);
            save_checkpoint_with_metadata(&model, &meta, path)?;
        }
        if let Some(path) = &out.log {
            write_csv(&history, path)?;
        }
    }
    if utility.digest() != frozen {
        return Err(Error::FrozenModelModified);
    }
    Ok(Trained { model, history })
}

/// Stream index reserved for validation noise, far from the per-epoch ones.
const VALIDATION_STREAM: u64 = 1 << 40;

/// Mean `B` over all validation pixels and mean dice of the utility model
/// on noised validation images. The noise draw is the same every call.
pub fn noised_validation(
    noise: &ModelParams<f32>,
    utility: &ModelParams<f32>,
    val: &Dataset,
    cfg: &NoiseTrainConfig,
) -> Result<(f64, f64)> {
    let mut stream = RngStream::new(cfg.seed).substream(VALIDATION_STREAM);
    let (mut b_sum, mut b_count) = (0.0, 0usize);
    let dice = mean_dice_with(val, cfg.batch_size, |images| {
        let mask = noise.predict(images)?.map(sigmoid);
        b_sum += mask.data().iter().map(|&b| b as f64).sum::<f64>();
        b_count += mask.numel();
        let eps = Tensor::randn(mask.shape().to_vec(), &mut stream);
        let noised = apply_noise(images, &mask, cfg.sigma_min, cfg.sigma_max, &eps)?;
        segment(utility, &noised)
    })?;
    Ok((b_sum / b_count as f64, dice))
}
