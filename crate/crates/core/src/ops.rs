//! Forward and backward kernels for every differentiable operation.
//!
//! Images and feature maps are `H x W x C` (channels last). Convolution
//! weights are laid out `kh x kw x C_in x C_out`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// Probability floor inside every logarithm of CE and KL.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
fn floored_ln(p: f64) -> f64 {
    libm::log(if p > LOG_FLOOR { p } else { LOG_FLOOR })
}

#[inline]
fn floored_ln_grad(p: f64) -> f64 {
    if p > LOG_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = logits.axis_split(axis)?;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = libm::exp(x[at(j)] - max);
                out[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Vector-Jacobian product of softmax given its output `probs`.
pub fn softmax_backward(probs: &Tensor, grad_out: &[f64], axis: usize) -> Result<Vec<f64>> {
    let (outer, n, inner) = probs.axis_split(axis)?;
    let s = probs.data();
    let mut g = vec![0.0; s.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| grad_out[at(j)] * s[at(j)]).sum();
            for j in 0..n {
                g[at(j)] = s[at(j)] * (grad_out[at(j)] - dot);
            }
        }
    }
    Ok(g)
}

fn check_pixel_dists(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.ndim() == 0 {
        return Err(arg_err!("{}: shape mismatch {:?} vs {:?}", what, a.shape(), b.shape()));
    }
    let k = a.shape()[a.ndim() - 1];
    Ok((a.len() / k.max(1), k))
}

/// `-sum_i sum_j w_i * y_ij * ln(max(p_ij, floor))` with `w` shaped like the
/// leading dimensions of `probs`.
pub fn weighted_cross_entropy(probs: &Tensor, onehot: &Tensor, weights: &Tensor) -> Result<f64> {
    let (pixels, k) = check_pixel_dists(probs, onehot, "weighted_cross_entropy")?;
    if weights.shape() != &probs.shape()[..probs.ndim() - 1] {
        return Err(arg_err!(
            "weighted_cross_entropy: weights {:?} do not match {:?}",
            weights.shape(),
            probs.shape()
        ));
    }
    let (p, y, w) = (probs.data(), onehot.data(), weights.data());
    let mut loss = 0.0;
    for i in 0..pixels {
        if w[i] == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for j in 0..k {
            let yij = y[i * k + j];
            if yij != 0.0 {
                acc += yij * floored_ln(p[i * k + j]);
            }
        }
        loss -= w[i] * acc;
    }
    Ok(loss)
}

pub fn weighted_cross_entropy_backward(
    probs: &Tensor,
    onehot: &Tensor,
    weights: &Tensor,
    grad_out: f64,
) -> Vec<f64> {
    let k = probs.shape()[probs.ndim() - 1];
    let (p, y, w) = (probs.data(), onehot.data(), weights.data());
    let mut g = vec![0.0; p.len()];
    for (idx, gi) in g.iter_mut().enumerate() {
        let yij = y[idx];
        if yij != 0.0 {
            *gi = -grad_out * w[idx / k] * yij * floored_ln_grad(p[idx]);
        }
    }
    g
}

/// `sum_i sum_j t_ij (ln t_ij - ln s_ij)`, both logs floored.
pub fn kl_divergence(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    check_pixel_dists(student, teacher, "kl_divergence")?;
    let mut acc = 0.0;
    for (&s, &t) in student.data().iter().zip(teacher.data()) {
        if t != 0.0 {
            acc += t * (floored_ln(t) - floored_ln(s));
        }
    }
    Ok(acc)
}

pub fn kl_divergence_backward(student: &Tensor, teacher: &Tensor, grad_out: f64) -> Vec<f64> {
    student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&s, &t)| -grad_out * t * floored_ln_grad(s))
        .collect()
}

/// Index of the largest entry along the last axis, lowest index on ties.
pub fn argmax_last(t: &Tensor) -> Vec<usize> {
    let k = t.shape().last().copied().unwrap_or(1).max(1);
    t.data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn argmax_onehot(logits: &Tensor) -> Tensor {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    let mut out = vec![0.0; logits.len()];
    for (i, j) in argmax_last(logits).into_iter().enumerate() {
        out[i * k + j] = 1.0;
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Convolution geometry shared by forward and backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

fn conv_dims(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeom,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (h, w, cin) = input.dims3()?;
    let (kh, kw, wc, cout) = match weight.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(arg_err!("conv2d: weight must be 4-d, got {:?}", s)),
    };
    if wc != cin {
        return Err(arg_err!("conv2d: input has {} channels, kernel expects {}", cin, wc));
    }
    if geom.stride == 0 || h + 2 * geom.padding < kh || w + 2 * geom.padding < kw {
        return Err(arg_err!("conv2d: kernel {}x{} does not fit input {}x{}", kh, kw, h, w));
    }
    let oh = (h + 2 * geom.padding - kh) / geom.stride + 1;
    let ow = (w + 2 * geom.padding - kw) / geom.stride + 1;
    Ok((h, w, cin, kh, kw, cout, oh, ow))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (h, w, cin, kh, kw, cout, oh, ow) = conv_dims(input, weight, geom)?;
    bias.expect_shape(&[cout], "conv2d bias")?;
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            o.copy_from_slice(b);
            for ky in 0..kh {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xp = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wk = &wt[(ky * kw + kx) * cin * cout..][..cin * cout];
                    for (ic, &a) in xp.iter().enumerate() {
                        let wr = &wk[ic * cout..][..cout];
                        for (acc, &wv) in o.iter_mut().zip(wr) {
                            *acc += a * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, cout], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is left
/// empty when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    geom: ConvGeom,
    need_input: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (h, w, cin, kh, kw, cout, oh, ow) = conv_dims(input, weight, geom)?;
    let (x, wt) = (input.data(), weight.data());
    let mut gx = if need_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &grad_out[(oy * ow + ox) * cout..][..cout];
            for (acc, &v) in gb.iter_mut().zip(g) {
                *acc += v;
            }
            for ky in 0..kh {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * cin;
                    let koff = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let a = x[base + ic];
                        let gwr = &mut gw[koff + ic * cout..][..cout];
                        for (acc, &gv) in gwr.iter_mut().zip(g) {
                            *acc += a * gv;
                        }
                    }
                    if need_input {
                        for ic in 0..cin {
                            let wr = &wt[koff + ic * cout..][..cout];
                            gx[base + ic] += wr.iter().zip(g).map(|(w, g)| w * g).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Affine map over the last axis: `[.., d_in] x [d_in, d_out] + [d_out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (din, dout) = match weight.shape() {
        &[a, b] => (a, b),
        s => return Err(arg_err!("linear: weight must be 2-d, got {:?}", s)),
    };
    if input.shape().last() != Some(&din) {
        return Err(arg_err!("linear: input {:?} does not end in {}", input.shape(), din));
    }
    bias.expect_shape(&[dout], "linear bias")?;
    let rows = input.len() / din;
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        let o = &mut out[r * dout..][..dout];
        o.copy_from_slice(b);
        for (i, &a) in x[r * din..][..din].iter().enumerate() {
            for (acc, &wv) in o.iter_mut().zip(&wt[i * dout..][..dout]) {
                *acc += a * wv;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("non-empty") = dout;
    Tensor::new(&shape, out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (din, dout) = (weight.shape()[0], weight.shape()[1]);
    let rows = input.len() / din;
    let (x, wt) = (input.data(), weight.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; dout];
    for r in 0..rows {
        let g = &grad_out[r * dout..][..dout];
        for (acc, &v) in gb.iter_mut().zip(g) {
            *acc += v;
        }
        for i in 0..din {
            let a = x[r * din + i];
            let wr = &wt[i * dout..][..dout];
            let gwr = &mut gw[i * dout..][..dout];
            let mut dot = 0.0;
            for o in 0..dout {
                dot += g[o] * wr[o];
                gwr[o] += a * g[o];
            }
            gx[r * din + i] = dot;
        }
    }
    (gx, gw, gb)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Source taps `(i0, i1, frac)` for half-pixel (align-corners off) resampling.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(arg_err!("upsample: empty extent"));
    }
    let (ty, tx) = (bilinear_taps(out_h, h), bilinear_taps(out_w, w));
    let x = input.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let o = &mut out[(oy * out_w + ox) * c..][..c];
            let taps = [
                ((1.0 - ly) * (1.0 - lx), y0 * w + x0),
                ((1.0 - ly) * lx, y0 * w + x1),
                (ly * (1.0 - lx), y1 * w + x0),
                (ly * lx, y1 * w + x1),
            ];
            for (wt, at) in taps {
                for (acc, &v) in o.iter_mut().zip(&x[at * c..][..c]) {
                    *acc += wt * v;
                }
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

pub fn upsample_bilinear_backward(input_shape: &[usize], grad_out: &[f64], out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ty, tx) = (bilinear_taps(out_h, h), bilinear_taps(out_w, w));
    let mut g = vec![0.0; h * w * c];
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            let go = &grad_out[(oy * out_w + ox) * c..][..c];
            let taps = [
                ((1.0 - ly) * (1.0 - lx), y0 * w + x0),
                ((1.0 - ly) * lx, y0 * w + x1),
                (ly * (1.0 - lx), y1 * w + x0),
                (ly * lx, y1 * w + x1),
            ];
            for (wt, at) in taps {
                for (acc, &v) in g[at * c..][..c].iter_mut().zip(go) {
                    *acc += wt * v;
                }
            }
        }
    }
    g
}

/// Nearest-neighbour resampling of an `H x W x C` map (no gradient).
pub fn resize_nearest(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.dims3()?;
    let x = input.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let sy = nearest_index(oy, out_h, h);
        for ox in 0..out_w {
            let sx = nearest_index(ox, out_w, w);
            out.extend_from_slice(&x[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

/// Source index of output cell `o` under nearest-neighbour resampling,
/// sampling at cell centres.
pub fn nearest_index(o: usize, out_len: usize, in_len: usize) -> usize {
    (((2 * o + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}
