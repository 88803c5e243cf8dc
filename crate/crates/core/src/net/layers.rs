//! Forward and backward kernels for the individual layer kinds.
//!
//! Convolution is implemented directly (no im2col); there is no performance
//! target here beyond keeping desk-scale experiments quick.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

use super::{LayerSpec, NetError};

/// Largest f64 strictly below 1. Tanh outputs are clamped into
/// `[-TANH_CEIL, TANH_CEIL]` so extracted features always lie strictly
/// inside (-1, 1), even when the activation saturates.
pub(crate) const TANH_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Per-layer state recorded during the forward pass for use in backward.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    None,
    /// Flat input index of the selected maximum for every output element.
    MaxPool(Vec<usize>),
}

fn shape_err(index: usize, message: String) -> NetError {
    NetError::ShapeMismatch { index, message }
}

pub(crate) fn forward_layer(
    index: usize,
    spec: &LayerSpec,
    input: &Tensor,
    weight: Option<&Tensor>,
    bias: Option<&Tensor>,
) -> Result<(Tensor, LayerCache), NetError> {
    match spec {
        LayerSpec::Dense { in_dim, out_dim } => {
            let w = weight.expect("dense layer has weights");
            let b = bias.expect("dense layer has bias");
            dense_forward(index, input, w, b, *in_dim, *out_dim)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let w = weight.expect("conv layer has weights");
            let b = bias.expect("conv layer has bias");
            conv2d_forward(
                index,
                input,
                w,
                b,
                *in_channels,
                *out_channels,
                *kernel,
                *stride,
                *padding,
            )
        }
        LayerSpec::MaxPool2d { window, stride } => maxpool_forward(index, input, *window, *stride),
        LayerSpec::Relu => {
            let mut out = input.clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok((out, LayerCache::None))
        }
        LayerSpec::Tanh => {
            let mut out = input.clone();
            for v in out.data_mut() {
                *v = math::tanh(*v).clamp(-TANH_CEIL, TANH_CEIL);
            }
            Ok((out, LayerCache::None))
        }
        LayerSpec::Softmax => softmax_forward(input),
    }
}

/// Backpropagate `grad_out` through one layer, producing the gradient with
/// respect to the layer input and, for parameterized layers, the weight and
/// bias gradients. Softmax is deliberately unsupported: its gradient is fused
/// with the cross-entropy term and the backward walk starts below it.
pub(crate) fn backward_layer(
    spec: &LayerSpec,
    input: &Tensor,
    output: &Tensor,
    cache: &LayerCache,
    weight: Option<&Tensor>,
    grad_out: &Tensor,
) -> (Tensor, Option<(Tensor, Tensor)>) {
    match spec {
        LayerSpec::Dense { in_dim, out_dim } => {
            let w = weight.expect("dense layer has weights");
            dense_backward(input, w, grad_out, *in_dim, *out_dim)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => conv2d_backward(
            input,
            weight.expect("conv layer has weights"),
            grad_out,
            *in_channels,
            *out_channels,
            *kernel,
            *stride,
            *padding,
        ),
        LayerSpec::MaxPool2d { .. } => {
            let LayerCache::MaxPool(argmax) = cache else {
                unreachable!("maxpool cache recorded during forward");
            };
            let mut dx = Tensor::zeros(input.shape().to_vec());
            let d = dx.data_mut();
            for (o, &src) in argmax.iter().enumerate() {
                d[src] += grad_out.data()[o];
            }
            (dx, None)
        }
        LayerSpec::Relu => {
            let mut dx = grad_out.clone();
            for (g, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                if x <= 0.0 {
                    *g = 0.0;
                }
            }
            (dx, None)
        }
        LayerSpec::Tanh => {
            let mut dx = grad_out.clone();
            for (g, &a) in dx.data_mut().iter_mut().zip(output.data()) {
                *g *= 1.0 - a * a;
            }
            (dx, None)
        }
        LayerSpec::Softmax => unreachable!("softmax backward is fused with the loss"),
    }
}

fn dense_forward(
    index: usize,
    input: &Tensor,
    w: &Tensor,
    b: &Tensor,
    in_dim: usize,
    out_dim: usize,
) -> Result<(Tensor, LayerCache), NetError> {
    if input.row_len() != in_dim {
        return Err(shape_err(
            index,
            format!(
                "dense expects {} inputs per sample, batch provides {}",
                in_dim,
                input.row_len()
            ),
        ));
    }
    let n = input.rows();
    let wd = w.data();
    let bd = b.data();
    let mut out = Tensor::zeros(vec![n, out_dim]);
    let od = out.data_mut();
    for i in 0..n {
        let x = input.row(i);
        let y = &mut od[i * out_dim..(i + 1) * out_dim];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = bd[o];
            for (xv, wv) in x.iter().zip(row) {
                acc += xv * wv;
            }
            *yo = acc;
        }
    }
    Ok((out, LayerCache::None))
}

fn dense_backward(
    input: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    in_dim: usize,
    out_dim: usize,
) -> (Tensor, Option<(Tensor, Tensor)>) {
    let n = input.rows();
    let wd = w.data();
    let mut dw = Tensor::zeros(vec![out_dim, in_dim]);
    let mut db = Tensor::zeros(vec![out_dim]);
    let mut dx = Tensor::zeros(input.shape().to_vec());
    {
        let dwd = dw.data_mut();
        for i in 0..n {
            let x = &input.data()[i * in_dim..(i + 1) * in_dim];
            let dy = grad_out.row(i);
            for (o, &g) in dy.iter().enumerate() {
                db.data_mut()[o] += g;
                let wrow = &mut dwd[o * in_dim..(o + 1) * in_dim];
                for (dwv, xv) in wrow.iter_mut().zip(x) {
                    *dwv += g * xv;
                }
            }
        }
    }
    {
        let dxd = dx.data_mut();
        for i in 0..n {
            let dy = grad_out.row(i);
            let xg = &mut dxd[i * in_dim..(i + 1) * in_dim];
            for (o, &g) in dy.iter().enumerate() {
                let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                for (xv, wv) in xg.iter_mut().zip(wrow) {
                    *xv += g * wv;
                }
            }
        }
    }
    (dx, Some((dw, db)))
}

struct ConvGeom {
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry(
    index: usize,
    input: &Tensor,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    window_name: &str,
) -> Result<ConvGeom, NetError> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(shape_err(
            index,
            format!("expects [n, c, h, w] input, got shape {shape:?}"),
        ));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if c != in_channels {
        return Err(shape_err(
            index,
            format!("expects {in_channels} input channels, got {c}"),
        ));
    }
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(shape_err(
            index,
            format!(
                "{window_name} {kernel} exceeds padded input extent {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        ));
    }
    Ok(ConvGeom {
        h,
        w,
        out_h: (h + 2 * padding - kernel) / stride + 1,
        out_w: (w + 2 * padding - kernel) / stride + 1,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    index: usize,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, LayerCache), NetError> {
    let g = conv_geometry(index, input, in_channels, kernel, stride, padding, "kernel")?;
    let n = input.rows();
    let mut out = Tensor::zeros(vec![n, out_channels, g.out_h, g.out_w]);
    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();
    let in_plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    for b in 0..n {
        let x_base = b * in_channels * in_plane;
        let o_base = b * out_channels * out_plane;
        for o in 0..out_channels {
            let w_base = o * in_channels * kernel * kernel;
            for oi in 0..g.out_h {
                for oj in 0..g.out_w {
                    let mut acc = bd[o];
                    for c in 0..in_channels {
                        let xc = x_base + c * in_plane;
                        let wc = w_base + c * kernel * kernel;
                        for u in 0..kernel {
                            let yi = (oi * stride + u) as isize - padding as isize;
                            if yi < 0 || yi >= g.h as isize {
                                continue;
                            }
                            let xrow = xc + yi as usize * g.w;
                            let wrow = wc + u * kernel;
                            for v in 0..kernel {
                                let xj = (oj * stride + v) as isize - padding as isize;
                                if xj < 0 || xj >= g.w as isize {
                                    continue;
                                }
                                acc += xd[xrow + xj as usize] * wd[wrow + v];
                            }
                        }
                    }
                    od[o_base + o * out_plane + oi * g.out_w + oj] = acc;
                }
            }
        }
    }
    Ok((out, LayerCache::None))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Tensor, Option<(Tensor, Tensor)>) {
    let shape = input.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let out_h = grad_out.shape()[2];
    let out_w = grad_out.shape()[3];
    let in_plane = h * w;
    let out_plane = out_h * out_w;

    let mut dx = Tensor::zeros(shape.to_vec());
    let mut dw = Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]);
    let mut db = Tensor::zeros(vec![out_channels]);

    let xd = input.data();
    let wd = weight.data();
    let gd = grad_out.data();

    for b in 0..n {
        let x_base = b * in_channels * in_plane;
        let o_base = b * out_channels * out_plane;
        for o in 0..out_channels {
            let w_base = o * in_channels * kernel * kernel;
            for oi in 0..out_h {
                for oj in 0..out_w {
                    let g = gd[o_base + o * out_plane + oi * out_w + oj];
                    if g == 0.0 {
                        continue;
                    }
                    db.data_mut()[o] += g;
                    for c in 0..in_channels {
                        let xc = x_base + c * in_plane;
                        let wc = w_base + c * kernel * kernel;
                        for u in 0..kernel {
                            let yi = (oi * stride + u) as isize - padding as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let xrow = xc + yi as usize * w;
                            let wrow = wc + u * kernel;
                            for v in 0..kernel {
                                let xj = (oj * stride + v) as isize - padding as isize;
                                if xj < 0 || xj >= w as isize {
                                    continue;
                                }
                                dw.data_mut()[wrow + v] += g * xd[xrow + xj as usize];
                                dx.data_mut()[xrow + xj as usize] += g * wd[wrow + v];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, Some((dw, db)))
}

fn maxpool_forward(
    index: usize,
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, LayerCache), NetError> {
    let g = conv_geometry(index, input, input.shape().get(1).copied().unwrap_or(0), window, stride, 0, "pool window")?;
    let shape = input.shape();
    let (n, channels) = (shape[0], shape[1]);
    let in_plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    let mut out = Tensor::zeros(vec![n, channels, g.out_h, g.out_w]);
    let mut argmax = vec![0usize; n * channels * out_plane];
    let xd = input.data();
    let od = out.data_mut();
    for b in 0..n {
        for c in 0..channels {
            let xc = (b * channels + c) * in_plane;
            let oc = (b * channels + c) * out_plane;
            for oi in 0..g.out_h {
                for oj in 0..g.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for u in 0..window {
                        let row = xc + (oi * stride + u) * g.w;
                        for v in 0..window {
                            let idx = row + oj * stride + v;
                            // strict > keeps the first maximum on ties
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    od[oc + oi * g.out_w + oj] = best;
                    argmax[oc + oi * g.out_w + oj] = best_idx;
                }
            }
        }
    }
    Ok((out, LayerCache::MaxPool(argmax)))
}

fn softmax_forward(input: &Tensor) -> Result<(Tensor, LayerCache), NetError> {
    let width = input.row_len();
    let n = input.rows();
    let mut out = input.clone();
    let d = out.data_mut();
    for i in 0..n {
        let row = &mut d[i * width..(i + 1) * width];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok((out, LayerCache::None))
}
