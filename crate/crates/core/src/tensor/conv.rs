//! Direct kernels for 2-D cross-correlation via im2col + GEMM.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis, or `None` when the window
/// does not tile the padded input exactly.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// 1×1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one C×H×W image into a (C·K·K) × (H'·W') column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    col: &mut [T],
) {
    let out_h = conv2d_output_size(height, kernel, stride, padding).expect("invalid geometry");
    let out_w = conv2d_output_size(width, kernel, stride, padding).expect("invalid geometry");
    let geom = ConvGeometry {
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
        out_height: out_h,
        out_width: out_w,
    };
    im2col_geom(image, &geom, col);
}

fn im2col_geom<T: Scalar>(image: &[T], g: &ConvGeometry, col: &mut [T]) {
    let plane = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..g.out_height {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    let line = &mut dst[oh * g.out_width..(oh + 1) * g.out_width];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kj, g);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let shift = kj as isize - pad;
                            line[lo..hi].copy_from_slice(&src_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                        }
                        continue;
                    }
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - pad;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose stride-1 tap `kj` lands inside the row.
fn valid_span(kj: usize, g: &ConvGeometry) -> (usize, usize) {
    let shift = kj as isize - g.padding as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (g.width as isize - shift).clamp(0, g.out_width as isize) as usize;
    (lo.min(g.out_width), hi)
}

/// Folds a column matrix back onto the image, summing overlapping taps.
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeometry, image: &mut [T]) {
    let plane = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..g.out_height {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let line = &src[oh * g.out_width..(oh + 1) * g.out_width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kj, g);
                        let shift = kj as isize - pad;
                        let dst_span = &mut dst_row[(lo as isize + shift) as usize..(hi as isize + shift).max(lo as isize + shift) as usize];
                        for (d, &v) in dst_span.iter_mut().zip(&line[lo..hi.max(lo)]) {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for (ow, &v) in line.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - pad;
                        if iw >= 0 && iw < g.width as isize {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [_, c, h, w] = *input.shape() else {
        return Err(Error::Shape(format!(
            "conv2d input must be N×C×H×W, got {:?}",
            input.shape()
        )));
    };
    let [o, wc, kh, kw] = *weight.shape() else {
        return Err(Error::Shape(format!(
            "conv2d weight must be O×C×K×K, got {:?}",
            weight.shape()
        )));
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d input has {c} channels but weight expects {wc}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv2d kernel must be square with odd size, got {kh}×{kw}"
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "conv2d bias must have shape [{o}], got {:?}",
            bias.shape()
        )));
    }
    let out_h = conv2d_output_size(h, kh, stride, padding);
    let out_w = conv2d_output_size(w, kw, stride, padding);
    let (Some(out_height), Some(out_width)) = (out_h, out_w) else {
        return Err(Error::Shape(format!(
            "conv2d with kernel {kh}, stride {stride}, padding {padding} does not tile {h}×{w}"
        )));
    };
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: kh,
        stride,
        padding,
        out_height,
        out_width,
    })
}

pub(crate) fn forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let batch = input.shape()[0];
    let out_c = weight.shape()[0];
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_plane = g.channels * g.height * g.width;
    let mut out = Tensor::zeros([batch, out_c, g.out_height, g.out_width]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for n in 0..batch {
        let x = &input.data()[n * in_plane..(n + 1) * in_plane];
        let y = &mut out.data_mut()[n * out_c * cols..(n + 1) * out_c * cols];
        for (o, chunk) in y.chunks_mut(cols).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        let b = if g.is_pointwise() {
            x
        } else {
            im2col_geom(x, g, &mut col);
            &col
        };
        T::gemm(
            out_c,
            rows,
            cols,
            T::one(),
            (weight.data(), rows as isize, 1),
            (b, cols as isize, 1),
            T::one(),
            (y, cols as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_weight, need_bias) = need;
    let batch = input.shape()[0];
    let out_c = weight.shape()[0];
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_plane = g.channels * g.height * g.width;

    let mut grad_input = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut grad_weight = need_weight.then(|| vec![T::zero(); weight.numel()]);
    let grad_bias = need_bias.then(|| {
        (0..out_c)
            .map(|o| {
                (0..batch)
                    .map(|n| {
                        let s = (n * out_c + o) * cols;
                        grad_out[s..s + cols].iter().copied().sum::<T>()
                    })
                    .sum()
            })
            .collect()
    });

    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
    let mut grad_col = vec![T::zero(); if need_input && !g.is_pointwise() { rows * cols } else { 0 }];
    for n in 0..batch {
        let x = &input.data()[n * in_plane..(n + 1) * in_plane];
        let gy = &grad_out[n * out_c * cols..(n + 1) * out_c * cols];
        if let Some(gw) = grad_weight.as_mut() {
            let cmat = if g.is_pointwise() {
                x
            } else {
                im2col_geom(x, g, &mut col);
                &col
            };
            // gWᵀ (R×O) += col (R×P) · gYᵀ (P×O); both operands stay row-major
            T::gemm(
                rows,
                cols,
                out_c,
                T::one(),
                (cmat, cols as isize, 1),
                (gy, 1, cols as isize),
                T::one(),
                (gw, 1, rows as isize),
            );
        }
        if let Some(gx) = grad_input.as_mut() {
            let gx = &mut gx[n * in_plane..(n + 1) * in_plane];
            // gcol (R×P) = Wᵀ (R×O) · gY (O×P)
            if g.is_pointwise() {
                T::gemm(
                    rows,
                    out_c,
                    cols,
                    T::one(),
                    (weight.data(), 1, rows as isize),
                    (gy, cols as isize, 1),
                    T::one(),
                    (gx, cols as isize, 1),
                );
            } else {
                T::gemm(
                    rows,
                    out_c,
                    cols,
                    T::one(),
                    (weight.data(), 1, rows as isize),
                    (gy, cols as isize, 1),
                    T::zero(),
                    (&mut grad_col, cols as isize, 1),
                );
                col2im_add(&grad_col, g, gx);
            }
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}
