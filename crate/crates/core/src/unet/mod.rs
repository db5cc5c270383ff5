//! U-Net models parameterized by depth and base channel count.
//!
//! Layout for depth `D` and base channels `b`, with `c_d = b·2^d`:
//!
//! ```text
//! enc0      conv3(in → c0), conv3(c0 → c0)            64×64
//!   pool
//! enc1      conv3(c0 → c1), conv3(c1 → c1)            32×32
//!   ...
//! encD      conv3(c_{D-1} → c_D), conv3(c_D → c_D)    bottleneck
//! up{d}     upsample 2×, conv3(c_{d+1} → c_d)         for d = D-1 .. 0
//! dec{d}    concat(enc_d, up_d), conv3(2c_d → c_d), conv3(c_d → c_d)
//! head      conv1(c0 → out)
//! ```
//!
//! Every 3×3 convolution uses padding 1 and is followed by relu; the head is
//! linear. With `conv(i, o, k) = o·i·k² + o` the parameter count is
//!
//! ```text
//! conv(in, c0, 3) + conv(c0, c0, 3)
//!   + Σ_{d=1..D}   [conv(c_{d-1}, c_d, 3) + conv(c_d, c_d, 3)]
//!   + Σ_{d=0..D-1} [conv(c_{d+1}, c_d, 3) + conv(2c_d, c_d, 3) + conv(c_d, c_d, 3)]
//!   + conv(c0, out, 1)
//! ```
//!
//! Parameters are named `<block>.<conv>.<weight|bias>`, e.g.
//! `enc1.conv2.weight`, `up0.conv.bias`, `head.weight`.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint, save_checkpoint_with_metadata, Metadata,
    FORMAT_VERSION, MAGIC,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, RngStream, Scalar, Tensor, Var};

/// Output head of a U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// N×K×H×W class logits.
    ClassLogits,
    /// N×H×W pre-sigmoid logits.
    SingleChannelLogit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub head: Head,
}

impl UNetConfig {
    /// Segmentation model with `classes` logit channels.
    pub fn segmentation(depth: usize, base_channels: usize, in_channels: usize, classes: usize) -> Self {
        Self {
            depth,
            base_channels,
            in_channels,
            out_channels: classes,
            head: Head::ClassLogits,
        }
    }

    /// Interpretability model emitting one noise logit per pixel.
    pub fn noise(depth: usize, base_channels: usize, in_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            in_channels,
            out_channels: 1,
            head: Head::SingleChannelLogit,
        }
    }

    pub fn small() -> Self {
        Self::noise(2, 16, 1)
    }

    pub fn medium() -> Self {
        Self::noise(3, 16, 1)
    }

    pub fn large() -> Self {
        Self::noise(4, 16, 1)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "medium" => Some(Self::medium()),
            "large" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate U-Net config {self:?}")));
        }
        if self.head == Head::SingleChannelLogit && self.out_channels != 1 {
            return Err(Error::InvalidArgument(
                "single-channel-logit head needs out_channels = 1".into(),
            ));
        }
        Ok(())
    }

    /// Channel count at stage `d`.
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }

    /// Convolution layers in forward order.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let mut layers = Vec::new();
        let mut prev = self.in_channels;
        for d in 0..=self.depth {
            let c = self.channels(d);
            layers.push(ConvLayer::new(format!("enc{d}.conv1"), prev, c, 3));
            layers.push(ConvLayer::new(format!("enc{d}.conv2"), c, c, 3));
            prev = c;
        }
        for d in (0..self.depth).rev() {
            let c = self.channels(d);
            layers.push(ConvLayer::new(format!("up{d}.conv"), self.channels(d + 1), c, 3));
            layers.push(ConvLayer::new(format!("dec{d}.conv1"), 2 * c, c, 3));
            layers.push(ConvLayer::new(format!("dec{d}.conv2"), c, c, 3));
        }
        layers.push(ConvLayer::new("head".into(), self.channels(0), self.out_channels, 1));
        layers
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                let prefix = if l.name == "head" { "head".to_string() } else { l.name.clone() };
                [
                    (format!("{prefix}.weight"), vec![l.out_channels, l.in_channels, l.kernel, l.kernel]),
                    (format!("{prefix}.bias"), vec![l.out_channels]),
                ]
            })
            .collect()
    }
}

/// One convolution of the architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    fn new(name: String, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Closed-form parameter count of a configuration.
pub fn count_parameters(config: &UNetConfig) -> usize {
    config.layers().iter().map(ConvLayer::parameter_count).sum()
}

/// Where a parameter set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RandomInit,
    UtilityCheckpoint,
    PretrainedSegmentation,
}

/// Named parameters of a U-Net together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    config: UNetConfig,
    provenance: Provenance,
    params: Vec<(String, Tensor<T>)>,
}

/// Kaiming-uniform (fan-in) weights and zero biases, drawn in schema order.
pub fn build<T: Scalar>(config: UNetConfig, init_seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut stream = RngStream::new(init_seed);
    let params = config
        .schema()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64((2.0 * stream.uniform() - 1.0) * bound))
            } else {
                Tensor::zeros(shape)
            };
            (name, t)
        })
        .collect();
    Ok(ModelParams {
        config,
        provenance: Provenance::RandomInit,
        params,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Assembles parameters, checking them against the schema of `config`.
    pub fn from_parts(config: UNetConfig, provenance: Provenance, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let schema = config.schema();
        for (i, (name, shape)) in schema.iter().enumerate() {
            match params.get(i) {
                Some((n, t)) if n == name && t.shape() == shape.as_slice() => {}
                Some((n, t)) if n == name => {
                    return Err(Error::SchemaMismatch {
                        key: name.clone(),
                        reason: format!("shape {:?}, expected {shape:?}", t.shape()),
                    })
                }
                _ => {
                    return Err(match params.iter().find(|(n, _)| n == name) {
                        Some(_) => Error::SchemaMismatch {
                            key: name.clone(),
                            reason: "out of schema order".into(),
                        },
                        None => Error::SchemaMismatch {
                            key: name.clone(),
                            reason: "missing".into(),
                        },
                    })
                }
            }
        }
        if let Some((extra, _)) = params.get(schema.len()) {
            return Err(Error::SchemaMismatch {
                key: extra.clone(),
                reason: "not part of the model schema".into(),
            });
        }
        Ok(Self {
            config,
            provenance,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            provenance: self.provenance,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Swaps the output head for a freshly initialized one of `head`
    /// type, keeping every other parameter.
    pub fn with_new_head(&self, head: Head, out_channels: usize, init_seed: u64) -> Result<Self> {
        let config = UNetConfig {
            head,
            out_channels,
            ..self.config
        };
        let fresh = build::<T>(config, init_seed)?;
        let params = self
            .params
            .iter()
            .zip(fresh.params)
            .map(|((name, old), (fresh_name, new))| {
                debug_assert_eq!(*name, fresh_name);
                if name.starts_with("head.") {
                    (fresh_name, new)
                } else {
                    (name.clone(), old.clone())
                }
            })
            .collect();
        ModelParams::from_parts(config, self.provenance, params)
    }

    /// Records the parameters on `graph` as leaves.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|(_, t)| graph.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Gradients of the bound parameters, zero where none reached them.
    pub fn gradients(&self, graph: &Graph<T>, bound: &BoundParams) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|((_, t), &v)| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }

    /// Runs the network. See [`ModelParams::forward_detailed`].
    pub fn forward(&self, graph: &mut Graph<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(graph, bound, x, false)?.output)
    }

    /// Runs the network on an N×C×H×W input.
    ///
    /// With `detach_bottleneck`, the bottleneck activation is re-recorded as
    /// a gradient-tracking leaf, so a later backward pass exposes
    /// d(output)/d(bottleneck) through [`Graph::grad`] without touching the
    /// encoder.
    pub fn forward_detailed(
        &self,
        graph: &mut Graph<T>,
        bound: &BoundParams,
        x: Var,
        detach_bottleneck: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let [n, c, h, w] = *graph.shape(x) else {
            return Err(Error::Shape(format!("U-Net input must be N×C×H×W, got {:?}", graph.shape(x))));
        };
        if c != cfg.in_channels {
            return Err(Error::Shape(format!(
                "U-Net expects {} input channels, got {c}",
                cfg.in_channels
            )));
        }
        let div = cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                divisor: div,
            });
        }
        let mut layer = 0usize;
        let mut conv = |g: &mut Graph<T>, input: Var, relu: bool| -> Result<Var> {
            let (wv, bv) = (bound.vars[2 * layer], bound.vars[2 * layer + 1]);
            let k = g.shape(wv)[2];
            layer += 1;
            let y = g.conv2d(input, wv, bv, 1, k / 2)?;
            Ok(if relu { g.relu(y) } else { y })
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut cur = x;
        for d in 0..=cfg.depth {
            if d > 0 {
                cur = graph.max_pool2d(cur, 2)?;
            }
            cur = conv(graph, cur, true)?;
            cur = conv(graph, cur, true)?;
            if d < cfg.depth {
                skips.push(cur);
            }
        }
        let bottleneck = if detach_bottleneck {
            let value = graph.value(cur).clone();
            cur = graph.leaf(value, true);
            cur
        } else {
            cur
        };
        for d in (0..cfg.depth).rev() {
            let up = graph.upsample_bilinear2x(cur)?;
            let up = conv(graph, up, true)?;
            let cat = graph.concat_channels(&[skips[d], up])?;
            cur = conv(graph, cat, true)?;
            cur = conv(graph, cur, true)?;
        }
        let logits = conv(graph, cur, false)?;
        let output = match cfg.head {
            Head::ClassLogits => logits,
            Head::SingleChannelLogit => graph.reshape(logits, [n, h, w])?,
        };
        Ok(ForwardOutput { output, bottleneck })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Graph handles for a bound [`ModelParams`], in schema order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub output: Var,
    pub bottleneck: Var,
}

/// Per-pixel argmax over the class axis of N×K×H×W logits.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let [n, k, h, w] = [logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let plane = h * w;
    let z = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if z[(b * k + c) * plane + p] > z[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
