//! Conv-BN-ReLU composite used by the pooling stem/stages, the attention
//! output projection, the CFFN stages, and the decoder.

use crate::tensor::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, relu, relu_backward, BatchNormState,
    BnCache, BnMode, ConvParams, Tensor,
};
use crate::Result;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: BatchNormState,
}

impl ConvBn {
    pub fn he_init(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> ConvBn {
        ConvBn {
            conv: ConvParams::he_init(out_c, in_c, k, rng),
            bn: BatchNormState::new(out_c),
        }
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.bn.mode = mode;
    }
}

#[derive(Clone, Debug)]
pub struct CbrCache {
    pub input: Tensor,
    /// Convolution output before batch normalization.
    pub pre_bn: Tensor,
    pub bn_cache: BnCache,
    /// Batch-norm output before ReLU.
    pub pre_relu: Tensor,
}

#[derive(Clone, Debug)]
pub struct CbrGrad {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn cbr_forward(x: &Tensor, cb: &mut ConvBn) -> Result<(Tensor, CbrCache)> {
    let pre_bn = conv2d(x, &cb.conv)?;
    let (pre_relu, bn_cache) = batchnorm(&pre_bn, &mut cb.bn)?;
    let y = relu(&pre_relu);
    Ok((
        y,
        CbrCache {
            input: x.clone(),
            pre_bn,
            bn_cache,
            pre_relu,
        },
    ))
}

pub fn cbr_backward(cache: &CbrCache, cb: &ConvBn, grad_y: &Tensor) -> Result<(Tensor, CbrGrad)> {
    let g_pre_relu = relu_backward(&cache.pre_relu, grad_y);
    let (g_pre_bn, gamma, beta) = batchnorm_backward(&cache.bn_cache, &cb.bn, &g_pre_relu)?;
    let (gx, weight, bias) = conv2d_backward(&cache.input, &cb.conv, &g_pre_bn)?;
    Ok((
        gx,
        CbrGrad {
            weight,
            bias,
            gamma,
            beta,
        },
    ))
}
