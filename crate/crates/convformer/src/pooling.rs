//! Tokenization replacement: a conv-BN-ReLU stem followed by d rounds of
//! (2x2 max-pool -> conv-BN-ReLU), taking a [c, H, W] map down to
//! [c_m, H/2^d, W/2^d] while keeping positional structure.

use crate::block::{cbr_backward, cbr_forward, CbrCache, CbrGrad, ConvBn};
use crate::tensor::{maxpool2x2, maxpool2x2_backward, BnMode, Tensor};
use crate::{Error, Result};
use rand::Rng;

/// Intermediate channel widths for the stem plus the d stages: geometric
/// interpolation from `c` to `c_m`, with the final stage forced to `c_m`.
/// Entry j is the output width of conv j (j = 0 is the stem).
pub fn channel_schedule(c: usize, c_m: usize, d: u32) -> Vec<usize> {
    let steps = d as usize + 1;
    let mut widths = Vec::with_capacity(steps);
    let ratio = c_m as f64 / c as f64;
    for j in 0..steps {
        let t = (j + 1) as f64 / steps as f64;
        let w = (c as f64 * ratio.powf(t)).round().max(1.0) as usize;
        widths.push(w);
    }
    widths[steps - 1] = c_m;
    widths
}

#[derive(Clone, Debug)]
pub struct PoolingParams {
    pub stem: ConvBn,
    pub stages: Vec<ConvBn>,
}

impl PoolingParams {
    pub fn build(c: usize, c_m: usize, d: u32, rng: &mut impl Rng) -> Result<PoolingParams> {
        if c == 0 || c_m == 0 {
            return Err(Error::Config(format!(
                "channel widths must be positive (c={}, c_m={})",
                c, c_m
            )));
        }
        let widths = channel_schedule(c, c_m, d);
        let stem = ConvBn::he_init(widths[0], c, 3, rng);
        let mut stages = Vec::new();
        for s in 0..d as usize {
            stages.push(ConvBn::he_init(widths[s + 1], widths[s], 3, rng));
        }
        Ok(PoolingParams { stem, stages })
    }

    pub fn d(&self) -> u32 {
        self.stages.len() as u32
    }

    pub fn out_c(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.conv.out_c())
            .unwrap_or_else(|| self.stem.conv.out_c())
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.stem.set_mode(mode);
        for s in &mut self.stages {
            s.set_mode(mode);
        }
    }

    pub fn param_entries(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = vec![
            ("stem.conv.weight".into(), &mut self.stem.conv.weight),
            ("stem.conv.bias".into(), &mut self.stem.conv.bias),
            ("stem.bn.gamma".into(), &mut self.stem.bn.gamma),
            ("stem.bn.beta".into(), &mut self.stem.bn.beta),
        ];
        for (i, s) in self.stages.iter_mut().enumerate() {
            v.push((format!("stage{}.conv.weight", i), &mut s.conv.weight));
            v.push((format!("stage{}.conv.bias", i), &mut s.conv.bias));
            v.push((format!("stage{}.bn.gamma", i), &mut s.bn.gamma));
            v.push((format!("stage{}.bn.beta", i), &mut s.bn.beta));
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct StageCache {
    pub pool_input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
    pub cbr: CbrCache,
}

#[derive(Clone, Debug)]
pub struct PoolingCache {
    pub stem: CbrCache,
    pub stages: Vec<StageCache>,
}

impl PoolingCache {
    /// Convolution output of the last conv before its batch norm; used by
    /// structural locality checks.
    pub fn final_pre_bn(&self) -> &Tensor {
        self.stages
            .last()
            .map(|s| &s.cbr.pre_bn)
            .unwrap_or(&self.stem.pre_bn)
    }
}

#[derive(Clone, Debug)]
pub struct PoolingGrads {
    pub stem: CbrGrad,
    pub stages: Vec<CbrGrad>,
}

impl PoolingGrads {
    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("stem.conv.weight".into(), &self.stem.weight),
            ("stem.conv.bias".into(), &self.stem.bias),
            ("stem.bn.gamma".into(), &self.stem.gamma),
            ("stem.bn.beta".into(), &self.stem.beta),
        ];
        for (i, s) in self.stages.iter().enumerate() {
            v.push((format!("stage{}.conv.weight", i), &s.weight));
            v.push((format!("stage{}.conv.bias", i), &s.bias));
            v.push((format!("stage{}.bn.gamma", i), &s.gamma));
            v.push((format!("stage{}.bn.beta", i), &s.beta));
        }
        v
    }
}

pub fn pooling_forward(x: &Tensor, p: &mut PoolingParams) -> Result<(Tensor, PoolingCache)> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "pooling_forward",
            format!("input must be [c,h,w], got {:?}", x.shape()),
        ));
    }
    let d = p.d();
    let div = 1usize << d;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(
            "pooling_forward",
            format!(
                "spatial size {}x{} must be divisible by 2^d = {}",
                h, w, div
            ),
        ));
    }
    let (mut u, stem_cache) = cbr_forward(x, &mut p.stem)?;
    let mut stage_caches = Vec::new();
    for stage in p.stages.iter_mut() {
        let pool_input_shape = u.shape().to_vec();
        let (pooled, argmax) = maxpool2x2(&u)?;
        let (next, cbr) = cbr_forward(&pooled, stage)?;
        u = next;
        stage_caches.push(StageCache {
            pool_input_shape,
            argmax,
            cbr,
        });
    }
    Ok((
        u,
        PoolingCache {
            stem: stem_cache,
            stages: stage_caches,
        },
    ))
}

pub fn pooling_backward(
    cache: &PoolingCache,
    p: &PoolingParams,
    grad_y: &Tensor,
) -> Result<(Tensor, PoolingGrads)> {
    let mut grad = grad_y.clone();
    let mut stage_grads = vec![None; p.stages.len()];
    for (i, (stage, sc)) in p.stages.iter().zip(cache.stages.iter()).enumerate().rev() {
        let (g_pool_out, cg) = cbr_backward(&sc.cbr, stage, &grad)?;
        grad = maxpool2x2_backward(&sc.pool_input_shape, &sc.argmax, &g_pool_out);
        stage_grads[i] = Some(cg);
    }
    let (gx, stem_grad) = cbr_backward(&cache.stem, &p.stem, &grad)?;
    Ok((
        gx,
        PoolingGrads {
            stem: stem_grad,
            stages: stage_grads.into_iter().map(|g| g.unwrap()).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cbr(width: usize) -> ConvBn {
        let mut w = Tensor::zeros(&[width, width, 3, 3]);
        for c in 0..width {
            w.set4(c, c, 1, 1, 1.0);
        }
        let mut cb = ConvBn {
            conv: ConvParams::new(w, Tensor::zeros(&[width])).unwrap(),
            bn: crate::tensor::BatchNormState::new(width),
        };
        cb.set_mode(BnMode::Bypass);
        cb
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(channel_schedule(1, 64, 3).last(), Some(&64));
        assert_eq!(channel_schedule(3, 3, 0), vec![3]);
        let s = channel_schedule(4, 32, 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s[2], 32);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn output_shape_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // S = 8 -> d = 3; 256 / 8 = 32
        let mut p = PoolingParams::build(1, 4, 3, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 256, 256]);
        let (y, _) = pooling_forward(&x, &mut p).unwrap();
        assert_eq!(y.shape(), &[4, 32, 32]);
    }

    #[test]
    fn d_zero_is_stem_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PoolingParams::build(2, 3, 0, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
        let (y, _) = pooling_forward(&x, &mut p).unwrap();
        assert_eq!(y.shape(), &[3, 6, 6]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PoolingParams::build(1, 2, 2, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 6, 6]);
        let err = pooling_forward(&x, &mut p).unwrap_err();
        assert!(format!("{}", err).contains("divisible"));
    }

    #[test]
    fn hand_evaluated_identity_chain() {
        // c = 1, 4x4 ramp, S = 4 (d = 2), identity kernels, BN bypassed:
        // stem is the identity, then two max-pool halvings leave the maximum.
        let mut p = PoolingParams {
            stem: identity_cbr(1),
            stages: vec![identity_cbr(1), identity_cbr(1)],
        };
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let (y, _) = pooling_forward(&x, &mut p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[15.0]);
    }

    #[test]
    fn backward_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = PoolingParams::build(2, 3, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let (y, cache) = pooling_forward(&x, &mut p).unwrap();
        let (gx, grads) = pooling_backward(&cache, &p, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        for (_, g) in grads.flat() {
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn d_zero_backward_matches_cbr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = PoolingParams::build(2, 3, 0, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let (y, cache) = pooling_forward(&x, &mut p).unwrap();
        let grad_y = Tensor::randn(y.shape(), 1.0, &mut rng);
        let (gx, grads) = pooling_backward(&cache, &p, &grad_y).unwrap();

        let mut stem = p.stem.clone();
        let (_, cbr_cache) = cbr_forward(&x, &mut stem).unwrap();
        let (gx_ref, g_ref) = cbr_backward(&cbr_cache, &stem, &grad_y).unwrap();
        assert_eq!(gx, gx_ref);
        assert_eq!(grads.stem.weight, g_ref.weight);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = PoolingParams::build(1, 2, 2, &mut rng).unwrap();
        p.set_mode(BnMode::Inference);
        let x = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let (y1, _) = pooling_forward(&x, &mut p.clone()).unwrap();
        let (y2, _) = pooling_forward(&x, &mut p.clone()).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn translation_by_stride_shifts_pre_bn_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = PoolingParams::build(1, 2, 2, &mut rng).unwrap();
        p.set_mode(BnMode::Bypass);
        let x = Tensor::randn(&[1, 32, 32], 1.0, &mut rng);
        // translate by 2^d = 4 pixels, zero fill
        let mut xs = Tensor::zeros(&[1, 32, 32]);
        for i in 4..32 {
            for j in 4..32 {
                xs.set3(0, i, j, x.at3(0, i - 4, j - 4));
            }
        }
        let (_, c1) = pooling_forward(&x, &mut p.clone()).unwrap();
        let (_, c2) = pooling_forward(&xs, &mut p.clone()).unwrap();
        let f1 = c1.final_pre_bn();
        let f2 = c2.final_pre_bn();
        // interior of the 8x8 final map: each final pixel's input footprint
        // (4 px plus a 7 px conv halo) must stay inside the image for both
        // the original and the shifted pixel, which restricts i, j to 3..6
        for c in 0..f1.shape()[0] {
            for i in 3..6 {
                for j in 3..6 {
                    let diff = (f2.at3(c, i, j) - f1.at3(c, i - 1, j - 1)).abs();
                    assert!(diff <= 1e-9, "diff {} at ({}, {}, {})", diff, c, i, j);
                }
            }
        }
    }
}
