//! Importance maps: U-Noise, occlusion sensitivity and Grad-CAM.
//!
//! Every map is H×W with higher values marking pixels the utility model
//! relies on more.

mod export;

pub use export::{export_map, pgm_bytes, write_pgm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{dice, foreground};
use crate::tensor::{sigmoid, Graph, Scalar, Tensor, Var};
use crate::training::FrozenModel;
use crate::unet::{argmax_classes, Head, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Unoise,
    Occlusion,
    Gradcam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Unoise => "unoise",
            Method::Occlusion => "occlusion",
            Method::Gradcam => "gradcam",
        }
    }
}

/// Output of a noise model for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMask {
    /// H×W values before the sigmoid.
    pub logits: Tensor<f64>,
    /// `sigmoid(logits)`, H×W in (0, 1).
    pub mask: Tensor<f64>,
}

impl NoiseMask {
    pub fn from_logits(logits: Tensor<f64>) -> Self {
        let mask = logits.map(sigmoid);
        Self { logits, mask }
    }
}

/// Flag set when Grad-CAM finds no pixel predicted as the target class.
pub const FLAG_EMPTY_TARGET: &str = "empty-target-region";

/// H×W importance values, higher is more important.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    values: Tensor<f64>,
    method: Method,
    flags: Vec<String>,
}

impl ImportanceMap {
    /// Rejects non-finite values and anything that is not H×W.
    pub fn new(values: Tensor<f64>, method: Method) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Shape(format!("importance map must be H×W, got {:?}", values.shape())));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{} map has non-finite values", method.name())));
        }
        Ok(Self {
            values,
            method,
            flags: Vec::new(),
        })
    }

    pub fn with_flag(mut self, flag: &str) -> Self {
        self.flags.push(flag.to_string());
        self
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Divides by the maximum so the largest value becomes 1. A map that is
/// zero everywhere stays zero. Expects non-negative input.
fn rescale_by_max(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

fn single_image<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected one C×H×W image, got {s:?}"))),
    }
}

fn batch_of_one<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

/// Noise logits N×H×W for an N×C×H×W batch.
pub fn noise_logits<T: Scalar>(noise_model: &ModelParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    if noise_model.config().head != Head::SingleChannelLogit {
        return Err(Error::InvalidArgument(
            "U-Noise maps need a model with a single-channel-logit head".into(),
        ));
    }
    noise_model.predict(images)
}

/// Noise mask and importance map of one C×H×W image.
///
/// Importance is `max(−logit, 0)` divided by its per-image maximum: pixels
/// that tolerate little noise (small `B`) matter most.
pub fn unoise_map<T: Scalar>(noise_model: &ModelParams<T>, x: &Tensor<T>) -> Result<(NoiseMask, ImportanceMap)> {
    let (_, h, w) = single_image(x)?;
    let logits = noise_logits(noise_model, &batch_of_one(x)?)?.cast::<f64>().reshape([h, w])?;
    let map = unoise_importance(&logits)?;
    Ok((NoiseMask::from_logits(logits), map))
}

/// Importance map from H×W noise logits.
pub fn unoise_importance(logits: &Tensor<f64>) -> Result<ImportanceMap> {
    let mut values = logits.map(|z| (-z).max(0.0));
    rescale_by_max(values.data_mut());
    ImportanceMap::new(values, Method::Unoise)
}

/// Top-left corners visited by a `window` sliding with `stride` over
/// `extent` pixels: `0, stride, 2·stride, …` while the window fits.
pub fn window_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..=extent - window).step_by(stride).collect()
}

/// Occlusion sensitivity of one C×H×W image.
///
/// A `window`×`window` square filled with `fill` in every channel slides
/// with `stride`. Each position scores `1 − dice` between the foreground
/// predicted on the occluded image and on the original; a pixel's value is
/// the mean score over the positions covering it (0 if none does).
pub fn occlusion_sensitivity<T: Scalar, U: FrozenModel<T> + ?Sized>(
    utility: &U,
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    fill: T,
) -> Result<ImportanceMap> {
    const CHUNK: usize = 16;
    let (c, h, w) = single_image(x)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("occlusion stride must be positive".into()));
    }
    if window == 0 || window > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "occlusion window {window} must be in 1..={}",
            h.min(w)
        )));
    }
    let predict = |batch: Tensor<T>| -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let xv = g.constant(batch);
        let logits = utility.logits(&mut g, xv)?;
        Ok(foreground(&argmax_classes(g.value(logits))))
    };
    let reference = predict(batch_of_one(x)?)?;
    let positions: Vec<(usize, usize)> = window_positions(h, window, stride)
        .into_iter()
        .flat_map(|top| window_positions(w, window, stride).into_iter().map(move |left| (top, left)))
        .collect();

    let plane = h * w;
    let mut score = vec![0.0; plane];
    let mut count = vec![0usize; plane];
    for chunk in positions.chunks(CHUNK) {
        let images: Vec<Tensor<T>> = chunk
            .iter()
            .map(|&(top, left)| {
                let mut img = x.clone();
                let d = img.data_mut();
                for ch in 0..c {
                    for y in top..top + window {
                        let row = ch * plane + y * w;
                        d[row + left..row + left + window].fill(fill);
                    }
                }
                img
            })
            .collect();
        let preds = predict(Tensor::stack(&images)?)?;
        for (k, &(top, left)) in chunk.iter().enumerate() {
            let drop = 1.0 - dice(&preds[k * plane..(k + 1) * plane], &reference)?;
            for y in top..top + window {
                for p in y * w + left..y * w + left + window {
                    score[p] += drop;
                    count[p] += 1;
                }
            }
        }
    }
    let values = score
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    ImportanceMap::new(Tensor::new([h, w], values)?, Method::Occlusion)
}

/// A model whose deepest activation can be inspected.
pub trait BottleneckModel<T: Scalar> {
    /// Returns class logits N×K×H×W and the bottleneck activation, which
    /// must be a gradient-tracking leaf so its gradient is readable after a
    /// backward pass.
    fn logits_and_bottleneck(&self, graph: &mut Graph<T>, x: Var) -> Result<(Var, Var)>;
}

impl<T: Scalar> BottleneckModel<T> for ModelParams<T> {
    fn logits_and_bottleneck(&self, graph: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let bound = self.bind(graph, false);
        let out = self.forward_detailed(graph, &bound, x, true)?;
        Ok((out.output, out.bottleneck))
    }
}

/// Grad-CAM at the bottleneck for one C×H×W image.
///
/// The score is the sum of the `target_class` logit over pixels predicted
/// as that class. Channel weights are the spatial means of the score's
/// gradient; `relu(Σ_k w_k A_k)` is resized bilinearly to H×W and divided
/// by its maximum. If no pixel is predicted as the target the map is zero
/// and carries [`FLAG_EMPTY_TARGET`].
pub fn grad_cam<T: Scalar, M: BottleneckModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    target_class: usize,
) -> Result<ImportanceMap> {
    let (_, h, w) = single_image(x)?;
    let mut g = Graph::new();
    let xv = g.constant(batch_of_one(x)?);
    let (logits, bottleneck) = model.logits_and_bottleneck(&mut g, xv)?;
    let classes = g.shape(logits)[1];
    if target_class >= classes {
        return Err(Error::ClassOutOfRange {
            index: target_class,
            classes,
        });
    }
    let labels = argmax_classes(g.value(logits));
    if !labels.iter().any(|&l| l as usize == target_class) {
        return Ok(ImportanceMap::new(Tensor::zeros([h, w]), Method::Gradcam)?.with_flag(FLAG_EMPTY_TARGET));
    }
    let region = Tensor::new(
        [1, h, w],
        labels.iter().map(|&l| if l as usize == target_class { T::one() } else { T::zero() }).collect(),
    )?;
    let target_logit = g.select_channel(logits, target_class)?;
    let region = g.constant(region);
    let masked = g.mul(target_logit, region)?;
    let score = g.sum(masked);
    g.backward(score)?;

    let activation = g.value(bottleneck);
    let [_, k, bh, bw] = *activation.shape() else {
        return Err(Error::Shape(format!("bottleneck must be 1×K×h×w, got {:?}", activation.shape())));
    };
    let bplane = bh * bw;
    let zeros = Tensor::zeros(activation.shape().to_vec());
    let grad = g.grad(bottleneck).unwrap_or(&zeros);
    let (a, da) = (activation.data(), grad.data());
    let mut cam = vec![0.0f64; bplane];
    for ch in 0..k {
        let span = ch * bplane..(ch + 1) * bplane;
        let weight = da[span.clone()].iter().map(|v| v.as_f64()).sum::<f64>() / bplane as f64;
        for (c, v) in cam.iter_mut().zip(&a[span]) {
            *c += weight * v.as_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = resize_bilinear(&cam, bh, bw, h, w);
    rescale_by_max(&mut values);
    ImportanceMap::new(Tensor::new([h, w], values)?, Method::Gradcam)
}

/// Bilinear resize of one plane with half-pixel centres and clamped edges.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let rows = upsample_weights_for(h, out_h);
    let cols = upsample_weights_for(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, wy0, wy1) in &rows {
        for &(x0, x1, wx0, wx1) in &cols {
            let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
            let bottom = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
            out.push(wy0 * top + wy1 * bottom);
        }
    }
    out
}

fn upsample_weights_for(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}
