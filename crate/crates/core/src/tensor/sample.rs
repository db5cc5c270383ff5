//! Resampling kernels: max-pooling and bilinear 2× upsampling.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn nchw<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape(format!("{op} expects N×C×H×W, got {:?}", t.shape()))),
    }
}

/// Non-overlapping window maxima; also returns the flat input index chosen
/// for every output element. Ties resolve to the first index in row-major
/// order within the window.
pub(crate) fn max_pool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = nchw(input, "max_pool2d")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!(
            "max_pool2d window {window} does not divide spatial size {h}×{w}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * window * w + j * window;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (i * window + di) * w + j * window + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

/// Source taps for each output index of a 2× bilinear upsample along one
/// axis (half-pixel centres, edges clamped): `(lo, hi, w_lo, w_hi)`.
pub fn upsample_weights(input: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * input)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(input, "upsample_bilinear2x")?;
    let rows = upsample_weights(h);
    let cols = upsample_weights(w);
    let (oh, ow) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::from_f64(wr0), T::from_f64(wr1));
            for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::from_f64(wc0), T::from_f64(wc1));
                d[i * ow + j] = wr0 * (wc0 * s[r0 * w + c0] + wc1 * s[r0 * w + c1])
                    + wr1 * (wc0 * s[r1 * w + c0] + wc1 * s[r1 * w + c1]);
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub(crate) fn upsample_backward<T: Scalar>(shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let rows = upsample_weights(h);
    let cols = upsample_weights(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let g = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut grad[plane * h * w..(plane + 1) * h * w];
        for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::from_f64(wr0), T::from_f64(wr1));
            for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::from_f64(wc0), T::from_f64(wc1));
                let v = g[i * ow + j];
                d[r0 * w + c0] = d[r0 * w + c0] + v * wr0 * wc0;
                d[r0 * w + c1] = d[r0 * w + c1] + v * wr0 * wc1;
                d[r1 * w + c0] = d[r1 * w + c0] + v * wr1 * wc0;
                d[r1 * w + c1] = d[r1 * w + c1] + v * wr1 * wc1;
            }
        }
    }
    grad
}
