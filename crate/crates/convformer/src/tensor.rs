//! Dense rank-<=4 tensors and the differentiable primitives every stage is
//! built from: 3x3 / 1x1 convolution, 2x2 max-pooling, batch normalization,
//! and ReLU. Layout is row-major with innermost width; canonical precision
//! is f64.

use crate::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(
                "tensor",
                format!("rank must be 1..=4, got shape {:?}", shape),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got shape {:?}", shape),
            ));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Standard-normal draws scaled by `std`, via Box-Muller so only a uniform
    /// source is needed.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let idx = (c * self.shape[1] + i) * self.shape[2] + j;
        self.data[idx] = v;
    }

    #[inline]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d]
    }

    #[inline]
    pub fn set4(&mut self, a: usize, b: usize, c: usize, d: usize, v: f64) {
        debug_assert_eq!(self.rank(), 4);
        let idx = ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d;
        self.data[idx] = v;
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(out)
    }

    pub fn add_scaled_assign(&mut self, other: &Tensor, s: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_scaled_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Copy the channel slice `[from, to)` of a rank-3 tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Tensor {
        assert_eq!(self.rank(), 3);
        assert!(from < to && to <= self.shape[0]);
        let (h, w) = (self.shape[1], self.shape[2]);
        let data = self.data[from * h * w..to * h * w].to_vec();
        Tensor::from_vec(&[to - from, h, w], data).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor, // [out_c, in_c, k, k]
    pub bias: Tensor,   // [out_c]
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<ConvParams> {
        if weight.rank() != 4 {
            return Err(Error::shape(
                "conv_params",
                format!("weight must be rank 4, got {:?}", weight.shape()),
            ));
        }
        let k = weight.shape()[2];
        if k != weight.shape()[3] || (k != 1 && k != 3) {
            return Err(Error::shape(
                "conv_params",
                format!("kernel must be 1x1 or 3x3, got {:?}", weight.shape()),
            ));
        }
        if bias.rank() != 1 || bias.shape()[0] != weight.shape()[0] {
            return Err(Error::shape(
                "conv_params",
                format!(
                    "bias {:?} inconsistent with weight {:?}",
                    bias.shape(),
                    weight.shape()
                ),
            ));
        }
        Ok(ConvParams { weight, bias })
    }

    /// He-style fan-in initialization; bias starts at zero.
    pub fn he_init(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> ConvParams {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        ConvParams {
            weight: Tensor::randn(&[out_c, in_c, k, k], std, rng),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize) -> ConvParams {
        ConvParams {
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn out_c(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_c(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Same-size 2D convolution (cross-correlation convention) with zero padding.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [c,h,w], got {:?}", x.shape()),
        ));
    }
    let (in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if in_c != p.in_c() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels but weight {:?} expects {}",
                in_c,
                p.weight.shape(),
                p.in_c()
            ),
        ));
    }
    let k = p.k();
    let pad = k / 2;
    let out_c = p.out_c();
    let mut y = Tensor::zeros(&[out_c, h, w]);
    let xd = x.data();
    let wd = p.weight.data();
    let bd = p.bias.data();
    let yd = y.data_mut();
    for o in 0..out_c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bd[o];
                for c in 0..in_c {
                    for l in 0..k {
                        let ii = i + l;
                        if ii < pad || ii >= h + pad {
                            continue;
                        }
                        let ii = ii - pad;
                        for g in 0..k {
                            let jj = j + g;
                            if jj < pad || jj >= w + pad {
                                continue;
                            }
                            let jj = jj - pad;
                            acc += wd[((o * in_c + c) * k + l) * k + g] * xd[(c * h + ii) * w + jj];
                        }
                    }
                }
                yd[(o * h + i) * w + j] = acc;
            }
        }
    }
    Ok(y)
}

/// Exact gradients of `conv2d` w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    p: &ConvParams,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if grad_y.shape() != [p.out_c(), h, w] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "cotangent {:?} does not match output [{}, {}, {}]",
                grad_y.shape(),
                p.out_c(),
                h,
                w
            ),
        ));
    }
    if in_c != p.in_c() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("input channels {} vs weight {:?}", in_c, p.weight.shape()),
        ));
    }
    let k = p.k();
    let pad = k / 2;
    let out_c = p.out_c();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(p.weight.shape());
    let mut gb = Tensor::zeros(p.bias.shape());
    let xd = x.data();
    let wd = p.weight.data();
    let gyd = grad_y.data();
    {
        let gxd = gx.data_mut();
        for o in 0..out_c {
            for i in 0..h {
                for j in 0..w {
                    let g = gyd[(o * h + i) * w + j];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..in_c {
                        for l in 0..k {
                            let ii = i + l;
                            if ii < pad || ii >= h + pad {
                                continue;
                            }
                            let ii = ii - pad;
                            for gg in 0..k {
                                let jj = j + gg;
                                if jj < pad || jj >= w + pad {
                                    continue;
                                }
                                let jj = jj - pad;
                                gxd[(c * h + ii) * w + jj] +=
                                    g * wd[((o * in_c + c) * k + l) * k + gg];
                            }
                        }
                    }
                }
            }
        }
    }
    {
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for o in 0..out_c {
            for i in 0..h {
                for j in 0..w {
                    let g = gyd[(o * h + i) * w + j];
                    if g == 0.0 {
                        continue;
                    }
                    gbd[o] += g;
                    for c in 0..in_c {
                        for l in 0..k {
                            let ii = i + l;
                            if ii < pad || ii >= h + pad {
                                continue;
                            }
                            let ii = ii - pad;
                            for gg in 0..k {
                                let jj = j + gg;
                                if jj < pad || jj >= w + pad {
                                    continue;
                                }
                                let jj = jj - pad;
                                gwd[((o * in_c + c) * k + l) * k + gg] +=
                                    g * xd[(c * h + ii) * w + jj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// Max pooling

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// scan order so backward routing is deterministic. Returns the pooled map and
/// the flat input index of each winner.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("input must be [c,h,w], got {:?}", x.shape()),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("spatial extents must be even, got {}x{}", h, w),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    let mut arg = vec![0usize; c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + i) * ow + j;
                yd[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((y, arg))
}

/// Routes the cotangent back to the recorded argmax positions.
pub fn maxpool2x2_backward(x_shape: &[usize], argmax: &[usize], grad_y: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(x_shape);
    let gxd = gx.data_mut();
    for (o, &idx) in argmax.iter().enumerate() {
        gxd[idx] += grad_y.data()[o];
    }
    gx
}

// ---------------------------------------------------------------------------
// ReLU

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    y
}

/// Subgradient at 0 is 0: gradient passes only where the pre-activation is
/// strictly positive.
pub fn relu_backward(pre_act: &Tensor, grad_y: &Tensor) -> Tensor {
    let mut gx = grad_y.clone();
    for (g, &x) in gx.data_mut().iter_mut().zip(pre_act.data().iter()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Training,
    Inference,
    /// Affine only (gamma * x + beta), no statistics. Used for identity-style
    /// configurations in tests and diagnostics.
    Bypass,
}

#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,        // [c]
    pub beta: Tensor,         // [c]
    pub running_mean: Tensor, // [c]
    pub running_var: Tensor,  // [c]
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    pub fn new(c: usize) -> BatchNormState {
        BatchNormState {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], 1.0),
            eps: 1e-5,
            momentum: 0.1,
            mode: BnMode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

/// Layout helper: interprets rank-3 input as a batch of one.
fn bn_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.rank() {
        3 => Ok((1, x.shape()[0], x.shape()[1] * x.shape()[2])),
        4 => Ok((x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3])),
        _ => Err(Error::shape(
            "batchnorm",
            format!("input must be [c,h,w] or [n,c,h,w], got {:?}", x.shape()),
        )),
    }
}

#[inline]
fn bn_offset(n_idx: usize, c: usize, num_c: usize, spatial: usize, ch: usize) -> usize {
    let _ = c;
    (n_idx * num_c + ch) * spatial
}

/// Per-channel batch normalization. Training mode standardizes by batch
/// statistics and updates the running estimates in place; inference mode uses
/// the running estimates.
pub fn batchnorm(x: &Tensor, s: &mut BatchNormState) -> Result<(Tensor, BnCache)> {
    let (n, c, spatial) = bn_dims(x)?;
    if c != s.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {} channels, state has {}", c, s.channels()),
        ));
    }
    let count = n * spatial;
    let mut y = x.clone();
    let mut xhat = x.clone();
    let mut inv_std = vec![0.0; c];
    match s.mode {
        BnMode::Training => {
            for ch in 0..c {
                let mut mean = 0.0;
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        mean += x.data()[off + k];
                    }
                }
                mean /= count as f64;
                let mut var = 0.0;
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        let d = x.data()[off + k] - mean;
                        var += d * d;
                    }
                }
                var /= count as f64;
                let istd = 1.0 / (var + s.eps).sqrt();
                inv_std[ch] = istd;
                let (g, bta) = (s.gamma.data()[ch], s.beta.data()[ch]);
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        let xh = (x.data()[off + k] - mean) * istd;
                        xhat.data_mut()[off + k] = xh;
                        y.data_mut()[off + k] = g * xh + bta;
                    }
                }
                let unbiased = if count > 1 {
                    var * count as f64 / (count - 1) as f64
                } else {
                    var
                };
                let rm = s.running_mean.data_mut();
                rm[ch] = (1.0 - s.momentum) * rm[ch] + s.momentum * mean;
                let rv = s.running_var.data_mut();
                rv[ch] = (1.0 - s.momentum) * rv[ch] + s.momentum * unbiased;
            }
        }
        BnMode::Inference => {
            for ch in 0..c {
                let mean = s.running_mean.data()[ch];
                let istd = 1.0 / (s.running_var.data()[ch] + s.eps).sqrt();
                inv_std[ch] = istd;
                let (g, bta) = (s.gamma.data()[ch], s.beta.data()[ch]);
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        let xh = (x.data()[off + k] - mean) * istd;
                        xhat.data_mut()[off + k] = xh;
                        y.data_mut()[off + k] = g * xh + bta;
                    }
                }
            }
        }
        BnMode::Bypass => {
            for ch in 0..c {
                inv_std[ch] = 1.0;
                let (g, bta) = (s.gamma.data()[ch], s.beta.data()[ch]);
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        y.data_mut()[off + k] = g * x.data()[off + k] + bta;
                    }
                }
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mode: s.mode,
        },
    ))
}

/// Gradients of `batchnorm` w.r.t. input, gamma, and beta. Training mode
/// differentiates through the batch statistics.
pub fn batchnorm_backward(
    cache: &BnCache,
    s: &BatchNormState,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, spatial) = bn_dims(grad_y)?;
    if grad_y.shape() != cache.xhat.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!(
                "cotangent {:?} vs cached {:?}",
                grad_y.shape(),
                cache.xhat.shape()
            ),
        ));
    }
    let count = (n * spatial) as f64;
    let mut gx = Tensor::zeros(grad_y.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let g = s.gamma.data()[ch];
        let istd = cache.inv_std[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let off = bn_offset(b, c, c, spatial, ch);
            for k in 0..spatial {
                let dy = grad_y.data()[off + k];
                sum_dy += dy;
                sum_dy_xhat += dy * cache.xhat.data()[off + k];
            }
        }
        ggamma.data_mut()[ch] = sum_dy_xhat;
        gbeta.data_mut()[ch] = sum_dy;
        match cache.mode {
            BnMode::Training => {
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        let dy = grad_y.data()[off + k];
                        let xh = cache.xhat.data()[off + k];
                        gx.data_mut()[off + k] =
                            g * istd / count * (count * dy - sum_dy - xh * sum_dy_xhat);
                    }
                }
            }
            BnMode::Inference => {
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        gx.data_mut()[off + k] = grad_y.data()[off + k] * g * istd;
                    }
                }
            }
            BnMode::Bypass => {
                for b in 0..n {
                    let off = bn_offset(b, c, c, spatial, ch);
                    for k in 0..spatial {
                        gx.data_mut()[off + k] = grad_y.data()[off + k] * g;
                    }
                }
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsampling (decoder plumbing)

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "upsample_nearest2x",
            format!("input must be [c,h,w], got {:?}", x.shape()),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                let v = x.at3(ch, i / 2, j / 2);
                y.set3(ch, i, j, v);
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest2x_backward(grad_y: &Tensor) -> Result<Tensor> {
    if grad_y.rank() != 3 {
        return Err(Error::shape(
            "upsample_nearest2x_backward",
            format!("cotangent must be [c,h,w], got {:?}", grad_y.shape()),
        ));
    }
    let (c, h2, w2) = (grad_y.shape()[0], grad_y.shape()[1], grad_y.shape()[2]);
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape(
            "upsample_nearest2x_backward",
            format!("cotangent extents must be even, got {}x{}", h2, w2),
        ));
    }
    let mut gx = Tensor::zeros(&[c, h2 / 2, w2 / 2]);
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let v = gx.at3(ch, i / 2, j / 2) + grad_y.at3(ch, i, j);
                gx.set3(ch, i / 2, j / 2, v);
            }
        }
    }
    Ok(gx)
}
