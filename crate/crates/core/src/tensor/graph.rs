use super::conv::{self, ConvGeometry};
use super::fpenv::FlushDenormals;
use super::sample;
use super::{sigmoid, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    ClampMin(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    BroadcastChannels(Var),
    SelectChannel {
        input: Var,
        channel: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape order is already a
/// topological order and [`Graph::backward`] is a single reverse sweep in
/// which each node propagates its gradient exactly once.
///
/// A node tracks gradients when it is a leaf created with
/// `requires_grad = true` or when any of its inputs does. After a backward
/// pass, gradients are readable on every tracking leaf; intermediate
/// gradients are discarded. Calling `backward` again without
/// [`Graph::zero_grad`] adds to the stored leaf gradients.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracking leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.tracks(&[x]);
        self.push(value, rg, op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    /// 2-D cross-correlation of `input` (N×C×H×W) with `weight` (O×C×K×K).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv::geometry(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let value = {
            let _flush = FlushDenormals::new();
            conv::forward(self.value(input), self.value(weight), self.value(bias), &geom)
        };
        let rg = self.tracks(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (value, argmax) = sample::max_pool_forward(self.value(input), window)?;
        let rg = self.tracks(&[input]);
        Ok(self.push(value, rg, Op::MaxPool { input, argmax }))
    }

    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let value = sample::upsample_forward(self.value(input))?;
        let rg = self.tracks(&[input]);
        Ok(self.push(value, rg, Op::Upsample(input)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self.value(x).data().iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
            return Err(Error::NonPositiveLog {
                index,
                value: value.as_f64(),
            });
        }
        Ok(self.unary(x, T::ln, Op::Log(x)))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, |v| if v > floor { v } else { floor }, Op::ClampMin(x, floor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        self.unary(x, |v| v + offset, Op::AddScalar(x))
    }

    /// Concatenates N×Cᵢ×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let [n, _, h, w] = *self.shape(first) else {
            return Err(Error::Shape(format!("concat expects N×C×H×W, got {:?}", self.shape(first))));
        };
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [pn, pc, ph, pw] if (pn, ph, pw) == (n, h, w) => channels.push(pc),
                ref s => {
                    return Err(Error::Shape(format!(
                        "concat: {s:?} incompatible with {:?}",
                        self.shape(first)
                    )))
                }
            }
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                data.extend_from_slice(&self.value(p).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new([n, total, h, w], data)?;
        let rg = self.tracks(parts);
        Ok(self.push(value, rg, Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.tracks(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.tracks(&[x]);
        self.push(value, rg, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.tracks(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Repeats an N×H×W tensor across `channels` to N×C×H×W.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let [n, h, w] = *self.shape(x) else {
            return Err(Error::Shape(format!("broadcast_channels expects N×H×W, got {:?}", self.shape(x))));
        };
        let src = self.value(x).data();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for _ in 0..channels {
                data.extend_from_slice(&src[b * plane..(b + 1) * plane]);
            }
        }
        let value = Tensor::new([n, channels, h, w], data)?;
        let rg = self.tracks(&[x]);
        Ok(self.push(value, rg, Op::BroadcastChannels(x)))
    }

    /// Extracts channel `channel` of an N×C×H×W tensor as N×H×W.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let [n, c, h, w] = *self.shape(x) else {
            return Err(Error::Shape(format!("select_channel expects N×C×H×W, got {:?}", self.shape(x))));
        };
        if channel >= c {
            return Err(Error::Shape(format!("channel {channel} out of range for {c} channels")));
        }
        let src = self.value(x).data();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * plane);
        for b in 0..n {
            let s = (b * c + channel) * plane;
            data.extend_from_slice(&src[s..s + plane]);
        }
        let value = Tensor::new([n, h, w], data)?;
        let rg = self.tracks(&[x]);
        Ok(self.push(value, rg, Op::SelectChannel { input: x, channel }))
    }

    /// Mean over all N·H·W positions of `-log softmax(logits)[target]`.
    ///
    /// `targets` holds one class index per position in N×H×W row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, k, h, w] = *self.shape(logits) else {
            return Err(Error::Shape(format!(
                "cross entropy expects N×K×H×W logits, got {:?}",
                self.shape(logits)
            )));
        };
        let plane = h * w;
        if targets.len() != n * plane {
            return Err(Error::Shape(format!(
                "cross entropy: {} targets for {} positions",
                targets.len(),
                n * plane
            )));
        }
        if let Some(&index) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::ClassOutOfRange { index, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for b in 0..n {
            for p in 0..plane {
                let at = |c: usize| (b * k + c) * plane + p;
                let max = (0..k).map(|c| z[at(c)]).fold(T::neg_infinity(), T::max);
                let denom: T = (0..k).map(|c| (z[at(c)] - max).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (z[at(c)] - max).exp() / denom;
                }
                let t = targets[b * plane + p];
                total = total + denom.ln() - (z[at(t)] - max);
            }
        }
        let value = Tensor::scalar(total / T::from_f64((n * plane) as f64));
        let rg = self.tracks(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let _flush = FlushDenormals::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let tracks = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a = *a + c;
                    }
                }
                None => grads[v.0] = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let zip_map = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> { g.iter().zip(a).map(|(&gv, &av)| f(gv, av)).collect() };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = conv::backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    geom,
                    (tracks(*input), tracks(*weight), tracks(*bias)),
                );
                if let Some(gx) = grads.input {
                    send(*input, gx);
                }
                if let Some(gw) = grads.weight {
                    send(*weight, gw);
                }
                if let Some(gb) = grads.bias {
                    send(*bias, gb);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![T::zero(); self.nodes[input.0].value.numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] = gx[idx] + gv;
                }
                send(*input, gx);
            }
            Op::Upsample(input) => {
                send(*input, sample::upsample_backward(self.nodes[input.0].value.shape(), g));
            }
            Op::Relu(x) => send(*x, zip_map(val(*x), &|gv, xv| if xv > T::zero() { gv } else { T::zero() })),
            Op::Sigmoid(x) => {
                let s = node.value.data();
                send(*x, zip_map(s, &|gv, sv| gv * sv * (T::one() - sv)));
            }
            Op::Log(x) => send(*x, zip_map(val(*x), &|gv, xv| gv / xv)),
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                send(*x, zip_map(val(*x), &|gv, xv| if xv > floor { gv } else { T::zero() }));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if tracks(*a) {
                    send(*a, zip_map(val(*b), &|gv, bv| gv * bv));
                }
                if tracks(*b) {
                    send(*b, zip_map(val(*a), &|gv, av| gv * av));
                }
            }
            Op::Scale(x, factor) => send(*x, g.iter().map(|&v| v * *factor).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat(parts) => {
                let [n, total, h, w] = *node.value.shape() else { unreachable!() };
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if tracks(p) {
                        let mut gp = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let s = (b * total + offset) * plane;
                            gp.extend_from_slice(&g[s..s + c * plane]);
                        }
                        send(p, gp);
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                send(*x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let [_, k, h, w] = *self.nodes[logits.0].value.shape() else { unreachable!() };
                let plane = h * w;
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (pos, &t) in targets.iter().enumerate() {
                    let (b, p) = (pos / plane, pos % plane);
                    let idx = (b * k + t) * plane + p;
                    gl[idx] = gl[idx] - scale;
                }
                send(*logits, gl);
            }
            Op::BroadcastChannels(x) => {
                let [n, c, h, w] = *node.value.shape() else { unreachable!() };
                let plane = h * w;
                let mut gx = vec![T::zero(); n * plane];
                for b in 0..n {
                    for ch in 0..c {
                        let s = (b * c + ch) * plane;
                        for (d, &v) in gx[b * plane..(b + 1) * plane].iter_mut().zip(&g[s..s + plane]) {
                            *d = *d + v;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::SelectChannel { input, channel } => {
                let [n, c, h, w] = *self.nodes[input.0].value.shape() else { unreachable!() };
                let plane = h * w;
                let mut gx = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let s = (b * c + channel) * plane;
                    gx[s..s + plane].copy_from_slice(&g[b * plane..(b + 1) * plane]);
                }
                send(*input, gx);
            }
        }
    }
}
