//! Layer kernels with hand-written backward passes. Activations are
//! `N × C × H × W` tensors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{resize_plane, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const PROB_CLIP: f64 = 1e-7;

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!(
            "{what} must be N×C×H×W, got {:?}",
            t.shape()
        ))),
    }
}

/// Row-major `m × n` product `c = a · b (+ c when accumulate)` with explicit
/// strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is bounded by the dimensions and strides,
    // which the callers derive from slices of matching length.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `C × H × W` sample into `(C·k·k) × (H·W)` columns for a
/// same-padded `k × k` convolution.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, x: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    x.fill(0.0);
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &g) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

fn check_conv(
    x: &Tensor,
    weight: &Tensor,
    bias: &[f32],
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = dims4(x, "conv input")?;
    let (co, ci, kh, kw) = dims4(weight, "conv weight")?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv expects {ci} input channels, got {c}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv kernel must be square and odd, got {kh}×{kw}"
        )));
    }
    if bias.len() != co {
        return Err(Error::Shape(format!(
            "conv bias has {} entries for {co} filters",
            bias.len()
        )));
    }
    Ok((n, c, h, w, co, kh))
}

/// Same-padded stride-1 convolution (cross-correlation).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (n, c, h, w, co, k) = check_conv(x, weight, bias)?;
    let hw = h * w;
    let kk = c * k * k;
    let mut y = Tensor::zeros(&[n, co, h, w]);
    y.data_mut()
        .par_chunks_mut(co * hw)
        .zip(x.data().par_chunks(c * hw))
        .for_each_init(
            || vec![0.0f32; kk * hw],
            |cols, (ys, xs)| {
                im2col(xs, c, h, w, k, cols);
                gemm(co, kk, hw, weight.data(), (kk, 1), cols, (hw, 1), ys, false);
                for (o, &b) in bias.iter().enumerate() {
                    for v in &mut ys[o * hw..(o + 1) * hw] {
                        *v += b;
                    }
                }
            },
        );
    Ok(y)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
    let co = weight.shape().first().copied().unwrap_or(0);
    let (n, c, h, w, co, k) = check_conv(x, weight, &vec![0.0; co])?;
    if dy.shape() != [n, co, h, w] {
        return Err(Error::Shape(format!(
            "conv output gradient {:?} does not match {:?}",
            dy.shape(),
            [n, co, h, w]
        )));
    }
    let hw = h * w;
    let kk = c * k * k;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    // Per-sample weight gradients, reduced afterwards in sample order.
    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = dx
        .data_mut()
        .par_chunks_mut(c * hw)
        .zip(x.data().par_chunks(c * hw))
        .zip(dy.data().par_chunks(co * hw))
        .map(|((dxs, xs), dys)| {
            let mut cols = vec![0.0f32; kk * hw];
            im2col(xs, c, h, w, k, &mut cols);
            let mut dw = vec![0.0f32; co * kk];
            gemm(co, hw, kk, dys, (hw, 1), &cols, (1, hw), &mut dw, false);
            let db: Vec<f32> = (0..co)
                .map(|o| {
                    dys[o * hw..(o + 1) * hw]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>() as f32
                })
                .collect();
            gemm(
                kk,
                co,
                hw,
                weight.data(),
                (1, kk),
                dys,
                (hw, 1),
                &mut cols,
                false,
            );
            col2im(&cols, c, h, w, k, dxs);
            (dw, db)
        })
        .collect();
    let mut dw = vec![0.0f32; co * kk];
    let mut db = vec![0.0f32; co];
    for (sw, sb) in &per_sample {
        for (a, b) in dw.iter_mut().zip(sw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(sb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: db,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Learnable scale/shift plus running statistics of one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Values kept from a training-mode forward pass for the backward pass.
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Batch normalization with the running estimates, leaving them untouched.
pub fn batchnorm_infer(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "batchnorm input")?;
    if p.gamma.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {c}",
            p.gamma.len()
        )));
    }
    let hw = h * w;
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (p.running_var[ch] + BN_EPS).sqrt();
        let (g, b, m) = (p.gamma[ch], p.beta[ch], p.running_mean[ch]);
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                yd[i] = g * (xd[i] - m) * inv + b;
            }
        }
    }
    Ok(y)
}

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and folds them into the running estimates with momentum 0.1;
/// inference mode uses the running estimates.
pub fn batchnorm(
    x: &Tensor,
    p: &mut BatchNormParams,
    mode: BnMode,
) -> Result<(Tensor, Option<BnCache>)> {
    let (n, c, h, w) = dims4(x, "batchnorm input")?;
    if p.gamma.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {c}",
            p.gamma.len()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape());
    match mode {
        BnMode::Infer => Ok((batchnorm_infer(x, p)?, None)),
        BnMode::Train => {
            let mut xhat = Tensor::zeros(x.shape());
            let mut inv_std = vec![0.0f32; c];
            for ch in 0..c {
                let (mut s1, mut s2) = (0.0f64, 0.0f64);
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    for &v in &xd[off..off + hw] {
                        s1 += v as f64;
                    }
                }
                let mean = s1 / count as f64;
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    for &v in &xd[off..off + hw] {
                        let d = v as f64 - mean;
                        s2 += d * d;
                    }
                }
                let var = s2 / count as f64;
                let inv = 1.0 / (var + BN_EPS as f64).sqrt();
                inv_std[ch] = inv as f32;
                let (g, b) = (p.gamma[ch], p.beta[ch]);
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    for i in off..off + hw {
                        let xh = ((xd[i] as f64 - mean) * inv) as f32;
                        xhat.data_mut()[i] = xh;
                        y.data_mut()[i] = g * xh + b;
                    }
                }
                let unbiased = if count > 1 {
                    s2 / (count - 1) as f64
                } else {
                    var
                };
                p.running_mean[ch] =
                    (1.0 - BN_MOMENTUM) * p.running_mean[ch] + BN_MOMENTUM * mean as f32;
                p.running_var[ch] =
                    (1.0 - BN_MOMENTUM) * p.running_var[ch] + BN_MOMENTUM * unbiased as f32;
            }
            Ok((y, Some(BnCache { xhat, inv_std })))
        }
    }
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Backward pass of a training-mode [`batchnorm`].
pub fn batchnorm_backward(dy: &Tensor, gamma: &[f32], cache: &BnCache) -> Result<BnGrads> {
    let (n, c, h, w) = dims4(dy, "batchnorm gradient")?;
    if cache.xhat.shape() != dy.shape() {
        return Err(Error::Shape(
            "batchnorm cache does not match gradient".into(),
        ));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let (dyd, xh) = (dy.data(), cache.xhat.data());
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (0.0f64, 0.0f64);
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dyd[i] as f64;
                sum_dy_xh += dyd[i] as f64 * xh[i] as f64;
            }
        }
        dgamma[ch] = sum_dy_xh as f32;
        dbeta[ch] = sum_dy as f32;
        let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / m;
        let dxd = dx.data_mut();
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                dxd[i] = (k * (m * dyd[i] as f64 - sum_dy - xh[i] as f64 * sum_dy_xh)) as f32;
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU; the subgradient at zero is taken as zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_with(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Argmax position of each 2×2 window as `0..4` in row-major window order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    /// Shape of the pooled input, `N × C × H × W`.
    pub input_shape: [usize; 4],
    pub indices: Vec<u8>,
}

/// Non-overlapping 2×2 max pooling, stride 2. Ties keep the first cell in
/// row-major order.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = dims4(x, "pool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "pooling needs even dimensions, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u8; n * c * oh * ow];
    let xd = x.data();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let cells = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0usize;
                for k in 1..4 {
                    if cells[k] > cells[best] {
                        best = k;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                y.data_mut()[o] = cells[best];
                idx[o] = best as u8;
            }
        }
    }
    Ok((
        y,
        PoolIndices {
            input_shape: [n, c, h, w],
            indices: idx,
        },
    ))
}

#[inline]
fn window_offset(k: u8, w: usize) -> usize {
    match k {
        0 => 0,
        1 => 1,
        2 => w,
        _ => w + 1,
    }
}

/// Places each value at its recorded argmax cell; every other cell is zero.
pub fn unpool2x2(y: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    let [n, c, h, w] = idx.input_shape;
    if y.shape() != [n, c, h / 2, w / 2] {
        return Err(Error::Shape(format!(
            "unpool input {:?} does not match indices for {:?}",
            y.shape(),
            idx.input_shape
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut x = Tensor::zeros(&[n, c, h, w]);
    let xd = x.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = p * oh * ow + oy * ow + ox;
                xd[p * h * w + 2 * oy * w + 2 * ox + window_offset(idx.indices[o], w)] =
                    y.data()[o];
            }
        }
    }
    Ok(x)
}

/// Adjoint of [`unpool2x2`]: reads the gradient at each recorded cell.
pub fn unpool2x2_backward(dx: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    let [n, c, h, w] = idx.input_shape;
    if dx.shape() != idx.input_shape {
        return Err(Error::Shape(
            "unpool gradient does not match indices".into(),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut dy = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = p * oh * ow + oy * ow + ox;
                dy.data_mut()[o] =
                    dx.data()[p * h * w + 2 * oy * w + 2 * ox + window_offset(idx.indices[o], w)];
            }
        }
    }
    Ok(dy)
}

/// Gradient of [`maxpool2x2`]: routes each pooled gradient to its argmax.
pub fn maxpool2x2_backward(dy: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    unpool2x2(dy, idx)
}

/// Appends `plane`, bilinearly resized to `H × W`, as one extra channel of
/// every sample.
pub fn concat_plane(x: &Tensor, planes: &[&Tensor]) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "concat input")?;
    if planes.len() != n {
        return Err(Error::Shape(format!(
            "{} planes for a batch of {n}",
            planes.len()
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c + 1, h, w]);
    for (s, plane) in planes.iter().enumerate() {
        let (ph, pw) = match *plane.shape() {
            [ph, pw] => (ph, pw),
            _ => {
                return Err(Error::Shape(format!(
                    "joint plane must be 2-D, got {:?}",
                    plane.shape()
                )))
            }
        };
        let dst = &mut out.data_mut()[s * (c + 1) * hw..(s + 1) * (c + 1) * hw];
        dst[..c * hw].copy_from_slice(&x.data()[s * c * hw..(s + 1) * c * hw]);
        resize_plane(plane.data(), ph, pw, &mut dst[c * hw..], h, w);
    }
    Ok(out)
}

/// Drops the gradient of the appended plane channel.
pub fn concat_plane_backward(dy: &Tensor) -> Result<Tensor> {
    let (n, c1, h, w) = dims4(dy, "concat gradient")?;
    let c = c1 - 1;
    let hw = h * w;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        dx.data_mut()[s * c * hw..(s + 1) * c * hw]
            .copy_from_slice(&dy.data()[s * c1 * hw..s * c1 * hw + c * hw]);
    }
    Ok(dx)
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy and its gradient with respect to `prob`.
/// Probabilities are clipped to `[1e-7, 1 − 1e-7]`; clipped entries get a
/// zero gradient.
pub fn bce_loss(prob: &[f32], target: &[f32]) -> Result<(f64, Vec<f32>)> {
    if prob.len() != target.len() || prob.is_empty() {
        return Err(Error::Shape(format!(
            "bce over {} probabilities and {} targets",
            prob.len(),
            target.len()
        )));
    }
    let m = prob.len() as f64;
    let mut loss = 0.0f64;
    let grad = prob
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let (p, y) = (p as f64, y as f64);
            let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if pc != p {
                0.0
            } else {
                ((pc - y) / (pc * (1.0 - pc)) / m) as f32
            }
        })
        .collect();
    Ok((loss / m, grad))
}

/// Sigmoid followed by mean BCE, with the gradient taken with respect to the
/// logits.
pub fn sigmoid_bce(logits: &[f32], target: &[f32]) -> Result<(f64, Vec<f32>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "bce over {} logits and {} targets",
            logits.len(),
            target.len()
        )));
    }
    let m = logits.len() as f64;
    let mut loss = 0.0f64;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let p = sigmoid(z) as f64;
            let y = y as f64;
            let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if pc != p {
                0.0
            } else {
                ((p - y) / m) as f32
            }
        })
        .collect();
    Ok((loss / m, grad))
}
