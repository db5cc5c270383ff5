use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, RngStream, Scalar, Tensor, Var};
use crate::unet::ModelParams;

/// Hyperparameters of U-Noise training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseTrainConfig {
    /// Weight of the `−λ·mean(log B)` term.
    pub lambda: f64,
    /// Noise standard deviation where `B = 0`, in normalized intensity units.
    pub sigma_min: f64,
    /// Noise standard deviation where `B = 1`.
    pub sigma_max: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `B` is clamped to at least this value before the log.
    pub log_floor: f64,
    /// Train the noise architecture on segmentation first.
    pub pretrain: bool,
    /// Segmentation epochs when `pretrain` is set.
    pub pretrain_epochs: usize,
}

/// Default noise ratio, picked by the λ sweep documented in the guide.
pub const DEFAULT_LAMBDA: f64 = 0.01;

impl Default for NoiseTrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            sigma_min: 0.05,
            sigma_max: 2.0,
            lr: 1e-3,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            log_floor: 1e-6,
            pretrain: false,
            pretrain_epochs: 30,
        }
    }
}

impl NoiseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return bad(format!(
                "need 0 <= sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad(format!("log_floor must be positive, got {}", self.log_floor));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        Ok(())
    }
}

/// A segmentation network whose parameters stay fixed while it is queried.
pub trait FrozenModel<T: Scalar> {
    /// Class logits N×K×H×W for an N×C×H×W input; must not mark any of
    /// its own parameters as gradient-tracking.
    fn logits(&self, graph: &mut Graph<T>, x: Var) -> Result<Var>;
}

impl<T: Scalar> FrozenModel<T> for ModelParams<T> {
    fn logits(&self, graph: &mut Graph<T>, x: Var) -> Result<Var> {
        let bound = self.bind(graph, false);
        self.forward(graph, &bound, x)
    }
}

/// `x + (σ_min + B·(σ_max − σ_min))·ε` on a graph, broadcast over channels.
///
/// `x` is N×C×H×W; `mask` and `eps` are N×H×W.
pub fn noised_input<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    mask: Var,
    eps: Var,
    sigma_min: f64,
    sigma_max: f64,
) -> Result<Var> {
    let channels = match *graph.shape(x) {
        [_, c, _, _] => c,
        ref s => return Err(Error::Shape(format!("noised input needs N×C×H×W, got {s:?}"))),
    };
    let sigma = graph.scale(mask, T::from_f64(sigma_max - sigma_min));
    let sigma = graph.add_scalar(sigma, T::from_f64(sigma_min));
    let noise = graph.mul(sigma, eps)?;
    let noise = graph.broadcast_channels(noise, channels)?;
    graph.add(x, noise)
}

/// Adds mask-scaled noise to an image.
///
/// Accepts `x` as C×H×W with `mask`/`eps` H×W, or batched N×C×H×W with
/// N×H×W. Mask values must lie in `[0, 1]`.
pub fn apply_noise<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    sigma_min: f64,
    sigma_max: f64,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if let Some(&v) = mask.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::InvalidArgument(format!(
            "noise mask values must lie in [0, 1], found {}",
            v.as_f64()
        )));
    }
    let single = x.ndim() == 3;
    let lift = |t: &Tensor<T>| -> Result<Tensor<T>> {
        if single {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshape(shape)
        } else {
            Ok(t.clone())
        }
    };
    let (xb, mb, eb) = (lift(x)?, lift(mask)?, lift(eps)?);
    if mb.ndim() != 3 || xb.ndim() != 4 {
        return Err(Error::Shape(format!(
            "apply_noise: image {:?} with mask {:?}",
            x.shape(),
            mask.shape()
        )));
    }
    let expected = [xb.shape()[0], xb.shape()[2], xb.shape()[3]];
    if mb.shape() != expected || eb.shape() != expected {
        return Err(Error::Shape(format!(
            "apply_noise: mask {:?} and noise {:?} must match image plane {expected:?}",
            mask.shape(),
            eps.shape()
        )));
    }
    let mut g = Graph::new();
    let (xv, mv, ev) = (g.constant(xb), g.constant(mb), g.constant(eb));
    let out = noised_input(&mut g, xv, mv, ev, sigma_min, sigma_max)?;
    g.value(out).clone().reshape(x.shape().to_vec())
}

/// Handles to the parts of the U-Noise objective on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// `utility + noise_term`.
    pub total: Var,
    /// Cross-entropy of the frozen model on the noised input.
    pub utility: Var,
    /// `−λ·mean(log max(B, floor))`.
    pub noise_term: Var,
    /// `B = sigmoid(logits)`.
    pub mask: Var,
}

/// Records the U-Noise objective for noise logits `logits` (N×H×W) and a
/// fixed standard-normal draw `eps` (N×H×W).
pub fn unoise_objective<T: Scalar, U: FrozenModel<T> + ?Sized>(
    graph: &mut Graph<T>,
    utility: &U,
    x: Var,
    targets: &[usize],
    logits: Var,
    eps: Var,
    cfg: &NoiseTrainConfig,
) -> Result<LossTerms> {
    let mask = graph.sigmoid(logits);
    let noised = noised_input(graph, x, mask, eps, cfg.sigma_min, cfg.sigma_max)?;
    let class_logits = utility.logits(graph, noised)?;
    let utility_loss = graph.softmax_cross_entropy(class_logits, targets)?;
    let floored = graph.clamp_min(mask, T::from_f64(cfg.log_floor));
    let log_mask = graph.log(floored)?;
    let mean_log = graph.mean(log_mask);
    let noise_term = graph.scale(mean_log, T::from_f64(-cfg.lambda));
    let total = graph.add(utility_loss, noise_term)?;
    Ok(LossTerms {
        total,
        utility: utility_loss,
        noise_term,
        mask,
    })
}

/// Value of the U-Noise loss with `ε` drawn from `stream`.
pub fn unoise_loss<T: Scalar, U: FrozenModel<T> + ?Sized>(
    x: &Tensor<T>,
    targets: &[usize],
    logits: &Tensor<T>,
    utility: &U,
    cfg: &NoiseTrainConfig,
    stream: &mut RngStream,
) -> Result<T> {
    let eps = Tensor::randn(logits.shape().to_vec(), stream);
    unoise_loss_with_noise(x, targets, logits, utility, cfg, &eps)
}

/// Value of the U-Noise loss for a given noise draw.
pub fn unoise_loss_with_noise<T: Scalar, U: FrozenModel<T> + ?Sized>(
    x: &Tensor<T>,
    targets: &[usize],
    logits: &Tensor<T>,
    utility: &U,
    cfg: &NoiseTrainConfig,
    eps: &Tensor<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let lv = g.constant(logits.clone());
    let ev = g.constant(eps.clone());
    let terms = unoise_objective(&mut g, utility, xv, targets, lv, ev, cfg)?;
    Ok(g.value(terms.total).item())
}
