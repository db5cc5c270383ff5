//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;

use unoise::training::{unoise_loss_with_noise, unoise_objective, FrozenModel, NoiseTrainConfig};
use unoise::unet::{build, ModelParams, UNetConfig};
use unoise::{Graph, RngStream, Tensor, Var};

pub fn random_tensor(shape: &[usize], stream: &mut RngStream) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), stream)
}

/// Direct-summation cross-correlation, no im2col.
pub fn conv2d_direct(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += xv[((bi * c + ic) * h + ii as usize) * wd + jj as usize]
                                    * wv[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

/// Window maxima by scanning every window element.
pub fn max_pool_scan(x: &Tensor<f64>, window: usize) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = (h / window, w / window);
    Tensor::from_fn([n, c, oh, ow], |idx| {
        let j = idx % ow;
        let i = (idx / ow) % oh;
        let plane = idx / (oh * ow);
        let mut best = f64::NEG_INFINITY;
        for di in 0..window {
            for dj in 0..window {
                best = best.max(x.data()[plane * h * w + (i * window + di) * w + j * window + dj]);
            }
        }
        best
    })
}

/// Bilinear 2× upsample using a tent kernel over every source pixel.
pub fn upsample_tent(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let tent = |s: f64, i: usize| (1.0 - (s - i as f64).abs()).max(0.0);
    let src = |o: usize, len: usize| ((o as f64 + 0.5) * (len as f64 / (2 * len) as f64) - 0.5).clamp(0.0, (len - 1) as f64);
    Tensor::from_fn([n, c, 2 * h, 2 * w], |idx| {
        let j = idx % (2 * w);
        let i = (idx / (2 * w)) % (2 * h);
        let plane = idx / (4 * h * w);
        let (sy, sx) = (src(i, h), src(j, w));
        let mut acc = 0.0;
        for yi in 0..h {
            for xi in 0..w {
                acc += tent(sy, yi) * tent(sx, xi) * x.data()[plane * h * w + yi * w + xi];
            }
        }
        acc
    })
}

/// Per-pixel softmax followed by log, averaged.
pub fn cross_entropy_direct(logits: &Tensor<f64>, targets: &[usize]) -> f64 {
    let [n, k, h, w] = [logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let z = logits.data();
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..h * w {
            let exps: Vec<f64> = (0..k).map(|c| z[(b * k + c) * h * w + p].exp()).collect();
            let s: f64 = exps.iter().sum();
            total -= (exps[targets[b * h * w + p]] / s).ln();
        }
    }
    total / (n * h * w) as f64
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Fourth-order central difference. The end-to-end loss passes through two
/// networks, so a plain central difference at a step small enough to dodge
/// truncation drowns the smallest components in roundoff.
pub fn five_point_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |d: f64| {
                probe[i] = orig + d;
                f(&probe)
            };
            let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
            probe[i] = orig;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
        })
        .collect()
}

/// Largest elementwise relative error, with a tiny absolute floor on the
/// denominator so exact zeros compare cleanly.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error over every input of `op`, comparing backprop with
/// finite differences of `sum(op(inputs) * r)` for a fixed random `r`.
pub fn check_op(inputs: &[Tensor<f64>], seed: u64, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |values: &[Tensor<f64>], want_grads: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = op(&mut g, &vars);
        let proj = Tensor::randn(g.shape(out).to_vec(), &mut RngStream::new(seed ^ 0xabcd));
        let r = g.constant(proj);
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let grads = if want_grads {
            g.backward(loss).unwrap();
            vars.iter()
                .map(|&v| g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let numeric = finite_difference(input.data(), FD_STEP, |probe| {
            let mut perturbed = inputs.to_vec();
            perturbed[k] = Tensor::new(input.shape().to_vec(), probe.to_vec()).unwrap();
            eval(&perturbed, false).0
        });
        worst = worst.max(max_relative_error(&analytic[k], &numeric));
    }
    worst
}

/// Random values bounded away from zero so kinks are not straddled.
pub fn away_from_zero(shape: &[usize], s: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = s.standard_normal();
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

/// Distinct values spaced well beyond the finite-difference step.
pub fn distinct(shape: &[usize], s: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, s.range(0, i + 1));
    }
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.1 - 1.0)
}

/// Freshly built models have zero biases, which puts every all-dead input
/// patch exactly on a relu kink; random biases keep finite differences
/// away from kinks.
pub fn with_random_biases(model: ModelParams<f64>, seed: u64) -> ModelParams<f64> {
    let mut s = RngStream::new(seed);
    let params = model
        .iter()
        .map(|(n, t)| {
            let t = if n.ends_with(".bias") { Tensor::from_fn(t.shape().to_vec(), |_| 0.1 * s.standard_normal()) } else { t.clone() };
            (n.to_string(), t)
        })
        .collect();
    ModelParams::from_parts(*model.config(), model.provenance(), params).unwrap()
}

/// Depth-1 utility and noise models with random biases.
pub fn tiny_models(seed: u64) -> (ModelParams<f64>, ModelParams<f64>) {
    let utility = build::<f64>(UNetConfig::segmentation(1, 2, 1, 2), seed).unwrap();
    let noise = build::<f64>(UNetConfig::noise(1, 2, 1), seed + 1).unwrap();
    (with_random_biases(utility, 10 * seed + 40), with_random_biases(noise, 10 * seed + 50))
}

/// 8×8 image, labels and a noise draw.
pub fn toy_batch(seed: u64) -> (Tensor<f64>, Vec<usize>, Tensor<f64>) {
    let mut s = RngStream::new(seed);
    let x = Tensor::from_fn([1, 1, 8, 8], |_| s.uniform());
    let y = (0..64).map(|i| usize::from(i % 5 == 0)).collect();
    let eps = Tensor::randn([1, 8, 8], &mut s);
    (x, y, eps)
}

/// Outcome of one end-to-end gradient comparison.
#[derive(Debug, Clone)]
pub struct LossGradientCheck {
    pub label: String,
    /// Worst relative error over the smooth coordinates.
    pub error: f64,
    /// Coordinates whose finite difference straddles a ReLU or max-pool kink.
    pub kinks: usize,
    pub len: usize,
}

/// Compares backprop against five-point differences at a step `h` and `h / 2`.
/// Where the two estimates disagree, a ReLU or max-pool switch flips inside
/// the probe, and the coordinate is retried with a ten times smaller `h`.
/// Coordinates still inconsistent at the smallest step are counted as kinks
/// rather than scored.
fn kink_aware_check(label: &str, analytic: &[f64], x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> LossGradientCheck {
    let mut pending: Vec<usize> = (0..x.len()).collect();
    let mut error = 0.0f64;
    let mut probe = x.to_vec();
    for step in [1e-4, 1e-5, 1e-6, 1e-7] {
        // Roundoff in a five-point difference grows like 1 / step.
        let tol = |n: f64| 1e-13 / step + 1e-6 * n.abs();
        pending.retain(|&i| {
            let mut partial = |h: f64| {
                five_point_difference(&[x[i]], h, |v| {
                    probe[i] = v[0];
                    let l = f(&probe);
                    probe[i] = x[i];
                    l
                })[0]
            };
            let (c, n) = (partial(step), partial(step / 2.0));
            if (c - n).abs() > tol(n) {
                return true;
            }
            error = error.max(max_relative_error(&[analytic[i]], &[n]));
            false
        });
    }
    LossGradientCheck { label: label.to_string(), error, kinks: pending.len(), len: x.len() }
}

/// Full U-Noise loss gradient, first with respect to the noise logits and then
/// end to end with respect to every noise-model parameter.
pub fn unoise_loss_gradient_errors(
    utility: &ModelParams<f64>,
    noise: &ModelParams<f64>,
    batch: &(Tensor<f64>, Vec<usize>, Tensor<f64>),
    cfg: &NoiseTrainConfig,
) -> Vec<LossGradientCheck> {
    let (x, y, eps) = batch;
    let logits = noise.predict(x).unwrap();
    let mut checks = Vec::new();

    let mut g = Graph::new();
    let (xv, ev) = (g.constant(x.clone()), g.constant(eps.clone()));
    let lv = g.leaf(logits.clone(), true);
    let terms = unoise_objective(&mut g, utility, xv, y, lv, ev, cfg).unwrap();
    g.backward(terms.total).unwrap();
    let analytic = g.grad(lv).unwrap().data().to_vec();
    checks.push(kink_aware_check("logits", &analytic, logits.data(), |p| {
        let l = Tensor::new(logits.shape().to_vec(), p.to_vec()).unwrap();
        unoise_loss_with_noise(x, y, &l, utility, cfg, eps).unwrap()
    }));

    let mut g = Graph::new();
    let bound = noise.bind(&mut g, true);
    let (xv, ev) = (g.constant(x.clone()), g.constant(eps.clone()));
    let lv = noise.forward(&mut g, &bound, xv).unwrap();
    let terms = unoise_objective(&mut g, utility, xv, y, lv, ev, cfg).unwrap();
    g.backward(terms.total).unwrap();
    let grads = noise.gradients(&g, &bound);
    for (k, (name, t)) in noise.iter().enumerate() {
        checks.push(kink_aware_check(name, grads[k].data(), t.data(), |p| {
            let params = noise
                .iter()
                .map(|(n, v)| {
                    let v = if n == name { Tensor::new(v.shape().to_vec(), p.to_vec()).unwrap() } else { v.clone() };
                    (n.to_string(), v)
                })
                .collect();
            let perturbed = ModelParams::from_parts(*noise.config(), noise.provenance(), params).unwrap();
            let l = perturbed.predict(x).unwrap();
            unoise_loss_with_noise(x, y, &l, utility, cfg, eps).unwrap()
        }));
    }
    checks
}

/// Dice from explicit index sets.
pub fn dice_sets(pred: &[u8], target: &[u8]) -> f64 {
    let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == 1).collect();
    let t: BTreeSet<usize> = (0..target.len()).filter(|&i| target[i] == 1).collect();
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&t).count() as f64 / (p.len() + t.len()) as f64
}

/// Foreground labels predicted by `model` for one C×H×W image.
pub fn predict_foreground<M: FrozenModel<f64>>(model: &M, x: &Tensor<f64>) -> Vec<u8> {
    let shape = x.shape().to_vec();
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape([1, shape[0], shape[1], shape[2]]).unwrap());
    let z = model.logits(&mut g, xv).unwrap();
    let z = g.value(z);
    let (k, plane) = (z.shape()[1], shape[1] * shape[2]);
    (0..plane)
        .map(|p| {
            let best = (0..k).fold(0, |b, c| if z.data()[c * plane + p] > z.data()[b * plane + p] { c } else { b });
            u8::from(best != 0)
        })
        .collect()
}

/// Occlusion sensitivity by enumerating window positions one at a time:
/// each pixel gets the mean of `1 − dice` over the windows covering it.
pub fn occlusion_enumeration<M: FrozenModel<f64>>(
    model: &M,
    x: &Tensor<f64>,
    window: usize,
    stride: usize,
    fill: f64,
) -> Vec<f64> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let reference = predict_foreground(model, x);
    let mut drops = Vec::new();
    let mut top = 0;
    while top + window <= h {
        let mut left = 0;
        while left + window <= w {
            let mut occluded = x.clone();
            for c in 0..x.shape()[0] {
                for yy in top..top + window {
                    for xx in left..left + window {
                        occluded.data_mut()[(c * h + yy) * w + xx] = fill;
                    }
                }
            }
            drops.push((top, left, 1.0 - dice_sets(&predict_foreground(model, &occluded), &reference)));
            left += stride;
        }
        top += stride;
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let covering: Vec<f64> = drops
                .iter()
                .filter(|(t, l, _)| (*t..t + window).contains(&y) && (*l..l + window).contains(&xx))
                .map(|d| d.2)
                .collect();
            if !covering.is_empty() {
                out[y * w + xx] = covering.iter().sum::<f64>() / covering.len() as f64;
            }
        }
    }
    out
}
