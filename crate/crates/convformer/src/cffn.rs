//! Convolutional feed-forward network: two 1x1 conv-BN-ReLU stages refining
//! per-pixel features, c_m -> c_h -> c_m.

use crate::block::{cbr_backward, cbr_forward, CbrCache, CbrGrad, ConvBn};
use crate::tensor::{BnMode, Tensor};
use crate::Result;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct CffnParams {
    pub stage1: ConvBn,
    pub stage2: ConvBn,
}

impl CffnParams {
    pub fn build(c_m: usize, c_h: usize, rng: &mut impl Rng) -> CffnParams {
        CffnParams {
            stage1: ConvBn::he_init(c_h, c_m, 1, rng),
            stage2: ConvBn::he_init(c_m, c_h, 1, rng),
        }
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.stage1.set_mode(mode);
        self.stage2.set_mode(mode);
    }

    pub fn param_entries(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("stage1.conv.weight".into(), &mut self.stage1.conv.weight),
            ("stage1.conv.bias".into(), &mut self.stage1.conv.bias),
            ("stage1.bn.gamma".into(), &mut self.stage1.bn.gamma),
            ("stage1.bn.beta".into(), &mut self.stage1.bn.beta),
            ("stage2.conv.weight".into(), &mut self.stage2.conv.weight),
            ("stage2.conv.bias".into(), &mut self.stage2.conv.bias),
            ("stage2.bn.gamma".into(), &mut self.stage2.bn.gamma),
            ("stage2.bn.beta".into(), &mut self.stage2.bn.beta),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct CffnCache {
    pub stage1: CbrCache,
    pub stage2: CbrCache,
}

#[derive(Clone, Debug)]
pub struct CffnGrads {
    pub stage1: CbrGrad,
    pub stage2: CbrGrad,
}

impl CffnGrads {
    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("stage1.conv.weight".into(), &self.stage1.weight),
            ("stage1.conv.bias".into(), &self.stage1.bias),
            ("stage1.bn.gamma".into(), &self.stage1.gamma),
            ("stage1.bn.beta".into(), &self.stage1.beta),
            ("stage2.conv.weight".into(), &self.stage2.weight),
            ("stage2.conv.bias".into(), &self.stage2.bias),
            ("stage2.bn.gamma".into(), &self.stage2.gamma),
            ("stage2.bn.beta".into(), &self.stage2.beta),
        ]
    }
}

pub fn cffn_forward(x: &Tensor, p: &mut CffnParams) -> Result<(Tensor, CffnCache)> {
    let (mid, c1) = cbr_forward(x, &mut p.stage1)?;
    let (y, c2) = cbr_forward(&mid, &mut p.stage2)?;
    Ok((y, CffnCache { stage1: c1, stage2: c2 }))
}

pub fn cffn_backward(
    cache: &CffnCache,
    p: &CffnParams,
    grad_y: &Tensor,
) -> Result<(Tensor, CffnGrads)> {
    let (g_mid, g2) = cbr_backward(&cache.stage2, &p.stage2, grad_y)?;
    let (gx, g1) = cbr_backward(&cache.stage1, &p.stage1, &g_mid)?;
    Ok((gx, CffnGrads { stage1: g1, stage2: g2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bypass_identity(width: usize) -> ConvBn {
        let mut w = Tensor::zeros(&[width, width, 1, 1]);
        for c in 0..width {
            w.set4(c, c, 0, 0, 1.0);
        }
        let mut cb = ConvBn {
            conv: ConvParams::new(w, Tensor::zeros(&[width])).unwrap(),
            bn: crate::tensor::BatchNormState::new(width),
        };
        cb.set_mode(BnMode::Bypass);
        cb
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = CffnParams::build(2, 4, &mut rng);
        p.set_mode(BnMode::Bypass);
        let x = Tensor::zeros(&[2, 3, 3]);
        let (y, _) = cffn_forward(&x, &mut p).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn identity_configuration() {
        let mut p = CffnParams {
            stage1: bypass_identity(2),
            stage2: bypass_identity(2),
        };
        let x = Tensor::from_vec(&[2, 1, 2], vec![0.5, 1.5, 2.0, 0.0]).unwrap();
        let (y, cache) = cffn_forward(&x, &mut p).unwrap();
        assert_eq!(y, x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Tensor::randn(x.shape(), 1.0, &mut rng);
        let (gx, _) = cffn_backward(&cache, &p, &g).unwrap();
        // gradient passes untouched where activations are strictly positive
        for i in 0..x.len() {
            if x.data()[i] > 0.0 {
                assert_eq!(gx.data()[i], g.data()[i]);
            }
        }
    }

    #[test]
    fn hand_evaluated_single_pixel() {
        // stage1 weight 2, stage2 weight -1 bias 1, BN bypassed:
        // relu(-relu(2 * 3) + 1) = relu(-5) = 0
        let mut p = CffnParams {
            stage1: bypass_identity(1),
            stage2: bypass_identity(1),
        };
        p.stage1.conv.weight = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        p.stage2.conv.weight = Tensor::from_vec(&[1, 1, 1, 1], vec![-1.0]).unwrap();
        p.stage2.conv.bias = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap();
        let (y, _) = cffn_forward(&x, &mut p).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn backward_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = CffnParams::build(3, 6, &mut rng);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let (y, cache) = cffn_forward(&x, &mut p).unwrap();
        let (gx, grads) = cffn_backward(&cache, &p, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        for (_, g) in grads.flat() {
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn spatial_locality_single_pixel_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = CffnParams::build(2, 4, &mut rng);
        p.set_mode(BnMode::Bypass); // batch statistics would couple pixels
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let (y0, _) = cffn_forward(&x, &mut p.clone()).unwrap();
        let mut x2 = x.clone();
        x2.set3(0, 2, 2, x.at3(0, 2, 2) + 5.0);
        let (y1, _) = cffn_forward(&x2, &mut p.clone()).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    if (i, j) != (2, 2) {
                        assert_eq!(y0.at3(c, i, j), y1.at3(c, i, j));
                    }
                }
            }
        }
    }
}
