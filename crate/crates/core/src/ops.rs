//! Forward and backward kernels for every tensor operation the encoder and
//! the distillation loss are built from.
//!
//! Kernels are pure functions: they borrow their inputs, allocate their
//! outputs, and never touch global state, so the tape-free eval path and the
//! recorded training path share one implementation. All activations use
//! 4-D `[batch, channels, height, width]` layout; vectors use `[batch, dim]`.
//!
//! Shape arithmetic for the spatial ops, with `k` = kernel size, `s` =
//! stride, `p` = zero padding per side:
//!
//! ```text
//! out_size = floor((in_size + 2p - k) / s) + 1
//! ```
//!
//! A kernel that does not fit the padded input (`out_size < 1`) is a
//! contract error. Every forward kernel validates its output for
//! finiteness and names itself in the numeric failure it raises.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added to vector norms before division in [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

fn want_rank<S: Scalar>(t: &Tensor<S>, rank: usize, what: &str, op: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::contract(format!(
            "{op}: {what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Output index range `[start, end)` for which `index*stride + offset - pad`
/// stays inside `[0, in_size)`.
fn valid_out_range(in_size: usize, out_size: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    let start = if offset >= pad { 0 } else { (pad - offset + stride - 1) / stride };
    let last_in = in_size as isize - 1 + pad as isize - offset as isize;
    if last_in < 0 {
        return (0, 0);
    }
    let end = ((last_in as usize) / stride + 1).min(out_size);
    (start.min(end), end)
}

fn conv_out_size(in_size: usize, k: usize, stride: usize, pad: usize, op: &str) -> Result<usize> {
    let padded = in_size + 2 * pad;
    if padded < k {
        return Err(Error::contract(format!(
            "{op}: kernel size {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Cross-correlation of `x: [n, ci, h, w]` with `w: [co, ci, kh, kw]`.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    want_rank(x, 4, "input", "conv2d")?;
    want_rank(w, 4, "kernel", "conv2d")?;
    if stride == 0 {
        return Err(Error::contract("conv2d: stride must be >= 1"));
    }
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != wci {
        return Err(Error::contract(format!(
            "conv2d: input has {ci} channels but kernel expects {wci}"
        )));
    }
    let oh = conv_out_size(h, kh, stride, pad, "conv2d")?;
    let ow = conv_out_size(wd, kw, stride, pad, "conv2d")?;

    let xs = x.data();
    let ws = w.data();
    let mut out = vec![S::zero(); n * co * oh * ow];

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        // 1x1 convolution is a channel mix; runs as repeated axpy rows.
        let hw = h * wd;
        for b in 0..n {
            for o in 0..co {
                let dst = &mut out[(b * co + o) * hw..(b * co + o + 1) * hw];
                for c in 0..ci {
                    let k = ws[o * ci + c];
                    let src = &xs[(b * ci + c) * hw..(b * ci + c + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += k * *s;
                    }
                }
            }
        }
    } else {
        for b in 0..n {
            for o in 0..co {
                for c in 0..ci {
                    for ki in 0..kh {
                        let (oi0, oi1) = valid_out_range(h, oh, stride, pad, ki);
                        for kj in 0..kw {
                            let kv = ws[((o * ci + c) * kh + ki) * kw + kj];
                            if kv == S::zero() {
                                continue;
                            }
                            let (oj0, oj1) = valid_out_range(wd, ow, stride, pad, kj);
                            for oi in oi0..oi1 {
                                let ii = oi * stride + ki - pad;
                                let xrow = (b * ci + c) * h * wd + ii * wd;
                                let orow = (b * co + o) * oh * ow + oi * ow;
                                for oj in oj0..oj1 {
                                    let ij = oj * stride + kj - pad;
                                    out[orow + oj] += kv * xs[xrow + ij];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let t = Tensor::from_parts(vec![n, co, oh, ow], out);
    t.check_finite("conv2d")?;
    Ok(t)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    pad: usize,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);

    let xs = x.data();
    let ws = w.data();
    let gs = grad.data();
    let mut dx = vec![S::zero(); xs.len()];
    let mut dw = vec![S::zero(); ws.len()];

    for b in 0..n {
        for o in 0..co {
            for c in 0..ci {
                for ki in 0..kh {
                    let (oi0, oi1) = valid_out_range(h, oh, stride, pad, ki);
                    for kj in 0..kw {
                        let (oj0, oj1) = valid_out_range(wd, ow, stride, pad, kj);
                        let widx = ((o * ci + c) * kh + ki) * kw + kj;
                        let kv = ws[widx];
                        let mut wacc = S::zero();
                        for oi in oi0..oi1 {
                            let ii = oi * stride + ki - pad;
                            let xrow = (b * ci + c) * h * wd + ii * wd;
                            let grow = (b * co + o) * oh * ow + oi * ow;
                            for oj in oj0..oj1 {
                                let ij = oj * stride + kj - pad;
                                let g = gs[grow + oj];
                                dx[xrow + ij] += kv * g;
                                wacc += g * xs[xrow + ij];
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }

    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    ))
}

/// Depthwise cross-correlation: `x: [n, c, h, w]`, `w: [c, 1, kh, kw]`,
/// channel `c` of the input convolved with kernel slice `c` only.
pub fn depthwise_conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    want_rank(x, 4, "input", "depthwise_conv2d")?;
    want_rank(w, 4, "kernel", "depthwise_conv2d")?;
    if stride == 0 {
        return Err(Error::contract("depthwise_conv2d: stride must be >= 1"));
    }
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wc, w1, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c || w1 != 1 {
        return Err(Error::contract(format!(
            "depthwise_conv2d: kernel shape {:?} does not match {c} input channels",
            w.shape()
        )));
    }
    let oh = conv_out_size(h, kh, stride, pad, "depthwise_conv2d")?;
    let ow = conv_out_size(wd, kw, stride, pad, "depthwise_conv2d")?;

    let xs = x.data();
    let ws = w.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for ki in 0..kh {
                let (oi0, oi1) = valid_out_range(h, oh, stride, pad, ki);
                for kj in 0..kw {
                    let kv = ws[(ch * kh + ki) * kw + kj];
                    let (oj0, oj1) = valid_out_range(wd, ow, stride, pad, kj);
                    for oi in oi0..oi1 {
                        let ii = oi * stride + ki - pad;
                        let xrow = (b * c + ch) * h * wd + ii * wd;
                        let orow = (b * c + ch) * oh * ow + oi * ow;
                        for oj in oj0..oj1 {
                            let ij = oj * stride + kj - pad;
                            out[orow + oj] += kv * xs[xrow + ij];
                        }
                    }
                }
            }
        }
    }

    let t = Tensor::from_parts(vec![n, c, oh, ow], out);
    t.check_finite("depthwise_conv2d")?;
    Ok(t)
}

/// Gradients of [`depthwise_conv2d`] with respect to input and kernel.
pub fn depthwise_conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    pad: usize,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);

    let xs = x.data();
    let ws = w.data();
    let gs = grad.data();
    let mut dx = vec![S::zero(); xs.len()];
    let mut dw = vec![S::zero(); ws.len()];
    for b in 0..n {
        for ch in 0..c {
            for ki in 0..kh {
                let (oi0, oi1) = valid_out_range(h, oh, stride, pad, ki);
                for kj in 0..kw {
                    let widx = (ch * kh + ki) * kw + kj;
                    let kv = ws[widx];
                    let (oj0, oj1) = valid_out_range(wd, ow, stride, pad, kj);
                    let mut wacc = S::zero();
                    for oi in oi0..oi1 {
                        let ii = oi * stride + ki - pad;
                        let xrow = (b * c + ch) * h * wd + ii * wd;
                        let grow = (b * c + ch) * oh * ow + oi * ow;
                        for oj in oj0..oj1 {
                            let ij = oj * stride + kj - pad;
                            let g = gs[grow + oj];
                            dx[xrow + ij] += kv * g;
                            wacc += g * xs[xrow + ij];
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }

    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
    ))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map `y = x W^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_rank(x, 2, "input", "linear")?;
    want_rank(w, 2, "weight", "linear")?;
    want_rank(b, 1, "bias", "linear")?;
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (dout, wdin) = (w.shape()[0], w.shape()[1]);
    if din != wdin || b.shape()[0] != dout {
        return Err(Error::contract(format!(
            "linear: incompatible shapes x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![S::zero(); n * dout];
    for i in 0..n {
        let xrow = &xs[i * din..(i + 1) * din];
        for o in 0..dout {
            let wrow = &ws[o * din..(o + 1) * din];
            let mut acc = bs[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += *xv * *wv;
            }
            out[i * dout + o] = acc;
        }
    }
    let t = Tensor::from_parts(vec![n, dout], out);
    t.check_finite("linear")?;
    Ok(t)
}

/// Gradients of [`linear`] with respect to input, weight, and bias.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let xs = x.data();
    let ws = w.data();
    let gs = grad.data();
    let mut dx = vec![S::zero(); n * din];
    let mut dw = vec![S::zero(); dout * din];
    let mut db = vec![S::zero(); dout];
    for i in 0..n {
        let xrow = &xs[i * din..(i + 1) * din];
        let grow = &gs[i * dout..(i + 1) * dout];
        let dxrow = &mut dx[i * din..(i + 1) * din];
        for o in 0..dout {
            let g = grow[o];
            if g == S::zero() {
                continue;
            }
            db[o] += g;
            let wrow = &ws[o * din..(o + 1) * din];
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for j in 0..din {
                dxrow[j] += g * wrow[j];
                dwrow[j] += g * xrow[j];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, din], dx),
        Tensor::from_parts(vec![dout, din], dw),
        Tensor::from_parts(vec![dout], db),
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Train-mode output together with the batch statistics the backward pass
/// and the running-average update need.
pub struct BatchNormOutput<S> {
    pub y: Tensor<S>,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Shared normalization expression. Train and eval both route through this
/// so that equal statistics produce bitwise-equal outputs.
fn bn_apply<S: Scalar>(
    x: &Tensor<S>,
    mean: &[S],
    var: &[S],
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> Tensor<S> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![S::zero(); xs.len()];
    for b in 0..n {
        for ch in 0..c {
            let inv_std = S::one() / (var[ch] + eps).sqrt();
            let (m, g, be) = (mean[ch], gamma[ch], beta[ch]);
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let xhat = (xs[base + i] - m) * inv_std;
                out[base + i] = g * xhat + be;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Train-mode batch normalization over `[n, c, h, w]` using population
/// statistics of the current batch per channel.
pub fn batchnorm2d_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<BatchNormOutput<S>> {
    want_rank(x, 4, "input", "batchnorm2d")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::contract(format!(
            "batchnorm2d: affine parameters must have {c} channels"
        )));
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::contract("batchnorm2d: empty batch"));
    }
    let hw = h * w;
    let xs = x.data();
    let count = S::from_usize(m).unwrap();
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut acc = S::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                acc += xs[base + i];
            }
        }
        let mu = acc / count;
        let mut vacc = S::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let d = xs[base + i] - mu;
                vacc += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = vacc / count;
    }
    let y = bn_apply(x, &mean, &var, gamma.data(), beta.data(), eps);
    y.check_finite("batchnorm2d")?;
    Ok(BatchNormOutput { y, mean, var })
}

/// Eval-mode batch normalization: a deterministic affine map using the
/// running statistics.
pub fn batchnorm2d_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    want_rank(x, 4, "input", "batchnorm2d")?;
    let c = x.shape()[1];
    if gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::contract(format!(
            "batchnorm2d: statistics and affine parameters must have {c} channels"
        )));
    }
    let y = bn_apply(x, running_mean.data(), running_var.data(), gamma.data(), beta.data(), eps);
    y.check_finite("batchnorm2d")?;
    Ok(y)
}

/// Gradients of train-mode batch normalization through the batch statistics.
pub fn batchnorm2d_train_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &[S],
    var: &[S],
    eps: S,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let m = S::from_usize(n * hw).unwrap();
    let xs = x.data();
    let gs = grad.data();
    let gam = gamma.data();
    let mut dx = vec![S::zero(); xs.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ch in 0..c {
        let inv_std = S::one() / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let g = gs[base + i];
                let xhat = (xs[base + i] - mu) * inv_std;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let k = gam[ch] * inv_std;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let g = gs[base + i];
                let xhat = (xs[base + i] - mu) * inv_std;
                dx[base + i] = k * (g - mean_g - xhat * mean_gx);
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let out: Vec<S> = x.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
    let t = Tensor::from_parts(x.shape().to_vec(), out);
    t.check_finite("relu")?;
    Ok(t)
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>) -> Tensor<S> {
    let out: Vec<S> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Hard swish: `x * clamp(x + 3, 0, 6) / 6`.
pub fn hswish<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let three = S::from_f64_c(3.0);
    let six = S::from_f64_c(6.0);
    let out: Vec<S> = x
        .data()
        .iter()
        .map(|&v| {
            let r = (v + three).max(S::zero()).min(six);
            v * r / six
        })
        .collect();
    let t = Tensor::from_parts(x.shape().to_vec(), out);
    t.check_finite("hswish")?;
    Ok(t)
}

pub fn hswish_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>) -> Tensor<S> {
    let three = S::from_f64_c(3.0);
    let six = S::from_f64_c(6.0);
    let two = S::from_f64_c(2.0);
    let out: Vec<S> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let d = if v <= -three {
                S::zero()
            } else if v >= three {
                S::one()
            } else {
                (two * v + three) / six
            };
            g * d
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let out: Vec<S> = x.data().iter().map(|&v| S::one() / (S::one() + (-v).exp())).collect();
    let t = Tensor::from_parts(x.shape().to_vec(), out);
    t.check_finite("sigmoid")?;
    Ok(t)
}

/// Backward through sigmoid, expressed with the saved forward output `y`.
pub fn sigmoid_backward<S: Scalar>(y: &Tensor<S>, grad: &Tensor<S>) -> Tensor<S> {
    let out: Vec<S> = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&yv, &g)| g * yv * (S::one() - yv))
        .collect();
    Tensor::from_parts(y.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Pooling, arithmetic, reductions
// ---------------------------------------------------------------------------

/// Mean over the spatial dimensions: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    want_rank(x, 4, "input", "global_avg_pool")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    if hw == 0 {
        return Err(Error::contract("global_avg_pool: empty spatial extent"));
    }
    let denom = S::from_usize(hw).unwrap();
    let xs = x.data();
    let mut out = vec![S::zero(); n * c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let mut acc = S::zero();
            for i in 0..hw {
                acc += xs[base + i];
            }
            out[b * c + ch] = acc / denom;
        }
    }
    let t = Tensor::from_parts(vec![n, c], out);
    t.check_finite("global_avg_pool")?;
    Ok(t)
}

pub fn global_avg_pool_backward<S: Scalar>(in_shape: &[usize], grad: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let hw = h * w;
    let scale = S::one() / S::from_usize(hw).unwrap();
    let gs = grad.data();
    let mut dx = vec![S::zero(); n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let g = gs[b * c + ch] * scale;
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                dx[base + i] = g;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "add: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let t = Tensor::from_parts(a.shape().to_vec(), out);
    t.check_finite("add")?;
    Ok(t)
}

/// Elementwise product. Two shape forms are accepted: identical shapes, or
/// `a: [n, c, h, w]` with `b: [n, c]`, in which case `b` scales each channel
/// across the spatial extent (the squeeze-excite gating pattern).
pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let t = if a.shape() == b.shape() {
        let out: Vec<S> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Tensor::from_parts(a.shape().to_vec(), out)
    } else if a.shape().len() == 4 && b.shape().len() == 2 && a.shape()[..2] == b.shape()[..] {
        let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let hw = h * w;
        let asd = a.data();
        let bs = b.data();
        let mut out = vec![S::zero(); asd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let s = bs[bi * c + ch];
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    out[base + i] = asd[base + i] * s;
                }
            }
        }
        Tensor::from_parts(a.shape().to_vec(), out)
    } else {
        return Err(Error::contract(format!(
            "mul: unsupported shape pair {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    };
    t.check_finite("mul")?;
    Ok(t)
}

/// Gradients of [`mul`] for both accepted shape forms.
pub fn mul_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, grad: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    if a.shape() == b.shape() {
        let da: Vec<S> = grad.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
        let db: Vec<S> = grad.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
        (
            Tensor::from_parts(a.shape().to_vec(), da),
            Tensor::from_parts(b.shape().to_vec(), db),
        )
    } else {
        let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let hw = h * w;
        let asd = a.data();
        let bs = b.data();
        let gs = grad.data();
        let mut da = vec![S::zero(); asd.len()];
        let mut db = vec![S::zero(); bs.len()];
        for bi in 0..n {
            for ch in 0..c {
                let s = bs[bi * c + ch];
                let base = (bi * c + ch) * hw;
                let mut acc = S::zero();
                for i in 0..hw {
                    da[base + i] = gs[base + i] * s;
                    acc += gs[base + i] * asd[base + i];
                }
                db[bi * c + ch] = acc;
            }
        }
        (
            Tensor::from_parts(a.shape().to_vec(), da),
            Tensor::from_parts(b.shape().to_vec(), db),
        )
    }
}

/// L2 normalization along `axis`. Each lane is divided by its Euclidean
/// norm plus [`NORM_EPS`]; all-zero lanes therefore stay zero.
pub fn l2_normalize<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.shape().len() {
        return Err(Error::contract(format!(
            "l2_normalize: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let eps = S::from_f64_c(NORM_EPS);
    let out = lane_map(x, axis, |lane, out_lane| {
        let mut sq = S::zero();
        for &v in lane.iter() {
            sq += v * v;
        }
        let denom = sq.sqrt() + eps;
        for (o, &v) in out_lane.iter_mut().zip(lane.iter()) {
            *o = v / denom;
        }
    });
    let t = Tensor::from_parts(x.shape().to_vec(), out);
    t.check_finite("l2_normalize")?;
    Ok(t)
}

/// Gradient of [`l2_normalize`]. Lanes with zero norm receive zero gradient
/// (the guarded forward pins them to zero output).
pub fn l2_normalize_backward<S: Scalar>(x: &Tensor<S>, axis: usize, grad: &Tensor<S>) -> Tensor<S> {
    let eps = S::from_f64_c(NORM_EPS);
    let gs = grad.data();
    let (outer, len, inner) = lane_geometry(x.shape(), axis);
    let xs = x.data();
    let mut dx = vec![S::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut sq = S::zero();
            let mut xg = S::zero();
            for k in 0..len {
                let idx = base + k * inner;
                sq += xs[idx] * xs[idx];
                xg += xs[idx] * gs[idx];
            }
            let norm = sq.sqrt();
            if norm == S::zero() {
                continue;
            }
            let denom = norm + eps;
            let coef = xg / (norm * denom * denom);
            for k in 0..len {
                let idx = base + k * inner;
                dx[idx] = gs[idx] / denom - xs[idx] * coef;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}

fn lane_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn lane_map<S: Scalar>(x: &Tensor<S>, axis: usize, mut f: impl FnMut(&[S], &mut [S])) -> Vec<S> {
    let (outer, len, inner) = lane_geometry(x.shape(), axis);
    let xs = x.data();
    let mut out = vec![S::zero(); xs.len()];
    let mut lane = vec![S::zero(); len];
    let mut out_lane = vec![S::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for k in 0..len {
                lane[k] = xs[base + k * inner];
            }
            f(&lane, &mut out_lane);
            for k in 0..len {
                out[base + k * inner] = out_lane[k];
            }
        }
    }
    out
}

/// Sum of every element, producing a rank-0 tensor.
pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut acc = S::zero();
    for &v in x.data() {
        acc += v;
    }
    let t = Tensor::scalar(acc);
    t.check_finite("sum")?;
    Ok(t)
}

/// Multiply every element by the constant `k`.
pub fn scale<S: Scalar>(x: &Tensor<S>, k: S) -> Result<Tensor<S>> {
    let out: Vec<S> = x.data().iter().map(|&v| v * k).collect();
    let t = Tensor::from_parts(x.shape().to_vec(), out);
    t.check_finite("scale")?;
    Ok(t)
}
