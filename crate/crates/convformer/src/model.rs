//! Assembles pooling -> L x [CSA -> CFFN] (with residual connections) into a
//! small encoder-decoder segmentation network with a combined cross-entropy +
//! soft-Dice loss.

use crate::block::{cbr_backward, cbr_forward, CbrCache, CbrGrad, ConvBn};
use crate::cffn::{cffn_backward, cffn_forward, CffnCache, CffnGrads, CffnParams};
use crate::csa::{
    csa_backward, csa_forward, AttentionField, CsaCache, CsaGrads, CsaParams, Geometry,
};
use crate::pooling::{
    channel_schedule, pooling_backward, pooling_forward, PoolingCache, PoolingGrads, PoolingParams,
};
use crate::tensor::{
    conv2d, conv2d_backward, upsample_nearest2x, upsample_nearest2x_backward, BnMode, ConvParams,
    Tensor,
};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvFormerConfig {
    pub c: usize,
    pub c_m: usize,
    pub c_q: usize,
    pub c_h: usize,
    /// ViT-style patch size S; the pooling depth is d = log2(S).
    pub patch_size: usize,
    pub alpha: f64,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvFormerConfig {
    pub fn d(&self) -> u32 {
        self.patch_size.trailing_zeros()
    }

    /// Every offending field is reported, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            problems.push(format!("patch_size must be a power of two, got {}", self.patch_size));
        }
        for (name, v) in [
            ("c", self.c),
            ("c_m", self.c_m),
            ("c_q", self.c_q),
            ("c_h", self.c_h),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                problems.push(format!("{} must be positive", name));
            }
        }
        if self.heads == 0 {
            problems.push("heads must be positive".into());
        } else if self.c_q % self.heads != 0 {
            problems.push(format!(
                "c_q = {} must be divisible by heads = {}",
                self.c_q, self.heads
            ));
        }
        if self.num_classes < 2 {
            problems.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            problems.push(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if self.patch_size != 0 && self.patch_size.is_power_of_two() {
            let div = 1usize << self.d();
            if self.height % div != 0 || self.width % div != 0 {
                problems.push(format!(
                    "height x width = {}x{} must be divisible by 2^d = {}",
                    self.height, self.width, div
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub csa: CsaParams,
    pub cffn: CffnParams,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ConvFormerConfig,
    pub pooling: PoolingParams,
    pub blocks: Vec<Block>,
    pub decoder: Vec<ConvBn>,
    pub head: ConvParams,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    pub pooling: PoolingCache,
    pub blocks: Vec<(CsaCache, CffnCache)>,
    pub decoder: Vec<CbrCache>,
    pub head_input: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub pooling: PoolingGrads,
    pub blocks: Vec<(CsaGrads, CffnGrads)>,
    pub decoder: Vec<CbrGrad>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ModelGrads {
    pub fn flat(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (name, t) in self.pooling.flat() {
            v.push((format!("pooling.{}", name), t));
        }
        for (i, (csa, cffn)) in self.blocks.iter().enumerate() {
            for (name, t) in csa.flat() {
                v.push((format!("block{}.csa.{}", i, name), t));
            }
            for (name, t) in cffn.flat() {
                v.push((format!("block{}.cffn.{}", i, name), t));
            }
        }
        for (i, d) in self.decoder.iter().enumerate() {
            v.push((format!("decoder{}.conv.weight", i), &d.weight));
            v.push((format!("decoder{}.conv.bias", i), &d.bias));
            v.push((format!("decoder{}.bn.gamma", i), &d.gamma));
            v.push((format!("decoder{}.bn.beta", i), &d.beta));
        }
        v.push(("head.weight".into(), &self.head_weight));
        v.push(("head.bias".into(), &self.head_bias));
        v
    }

    fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        v.push(&mut self.pooling.stem.weight);
        v.push(&mut self.pooling.stem.bias);
        v.push(&mut self.pooling.stem.gamma);
        v.push(&mut self.pooling.stem.beta);
        for s in &mut self.pooling.stages {
            v.push(&mut s.weight);
            v.push(&mut s.bias);
            v.push(&mut s.gamma);
            v.push(&mut s.beta);
        }
        for (csa, cffn) in &mut self.blocks {
            v.push(&mut csa.e_q);
            v.push(&mut csa.e_k);
            v.push(&mut csa.e_v);
            v.push(&mut csa.theta_raw);
            v.push(&mut csa.out.weight);
            v.push(&mut csa.out.bias);
            v.push(&mut csa.out.gamma);
            v.push(&mut csa.out.beta);
            for s in [&mut cffn.stage1, &mut cffn.stage2] {
                v.push(&mut s.weight);
                v.push(&mut s.bias);
                v.push(&mut s.gamma);
                v.push(&mut s.beta);
            }
        }
        for d in &mut self.decoder {
            v.push(&mut d.weight);
            v.push(&mut d.bias);
            v.push(&mut d.gamma);
            v.push(&mut d.beta);
        }
        v.push(&mut self.head_weight);
        v.push(&mut self.head_bias);
        v
    }

    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        let other_flat: Vec<Tensor> = other.flat().into_iter().map(|(_, t)| t.clone()).collect();
        for (mine, theirs) in self.flat_mut().into_iter().zip(other_flat.iter()) {
            mine.add_scaled_assign(theirs, 1.0)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.flat_mut() {
            t.scale_assign(s);
        }
    }
}

impl SegModel {
    pub fn build(config: &ConvFormerConfig, seed: u64) -> Result<SegModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d();
        let pooling = PoolingParams::build(config.c, config.c_m, d, &mut rng)?;
        let mut blocks = Vec::new();
        for _ in 0..config.layers {
            let csa = CsaParams::build(config.c_m, config.c_q, config.heads, config.alpha, &mut rng)?;
            let cffn = CffnParams::build(config.c_m, config.c_h, &mut rng);
            blocks.push(Block { csa, cffn });
        }
        // decoder mirrors the pooling widths in reverse
        let widths = channel_schedule(config.c, config.c_m, d);
        let mut decoder = Vec::new();
        let mut in_c = config.c_m;
        for i in 0..d as usize {
            let out_c = widths[d as usize - 1 - i];
            decoder.push(ConvBn::he_init(out_c, in_c, 3, &mut rng));
            in_c = out_c;
        }
        let head = ConvParams::he_init(config.num_classes, in_c, 1, &mut rng);
        Ok(SegModel {
            config: config.clone(),
            pooling,
            blocks,
            decoder,
            head,
        })
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.pooling.set_mode(mode);
        for b in &mut self.blocks {
            b.csa.set_mode(mode);
            b.cffn.set_mode(mode);
        }
        for d in &mut self.decoder {
            d.set_mode(mode);
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            d: self.config.d(),
            input_h: self.config.height,
            input_w: self.config.width,
        }
    }

    /// Trainable tensors, in the same order as `ModelGrads::flat`.
    pub fn param_entries(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (name, t) in self.pooling.param_entries() {
            v.push((format!("pooling.{}", name), t));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.csa.param_entries() {
                v.push((format!("block{}.csa.{}", i, name), t));
            }
            for (name, t) in b.cffn.param_entries() {
                v.push((format!("block{}.cffn.{}", i, name), t));
            }
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            v.push((format!("decoder{}.conv.weight", i), &mut d.conv.weight));
            v.push((format!("decoder{}.conv.bias", i), &mut d.conv.bias));
            v.push((format!("decoder{}.bn.gamma", i), &mut d.bn.gamma));
            v.push((format!("decoder{}.bn.beta", i), &mut d.bn.beta));
        }
        v.push(("head.weight".into(), &mut self.head.weight));
        v.push(("head.bias".into(), &mut self.head.bias));
        v
    }

    /// Everything a checkpoint must carry: trainable tensors plus the batch
    /// norm running statistics.
    pub fn state_entries(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        {
            let p = &mut self.pooling;
            v.push(("pooling.stem.conv.weight".to_string(), &mut p.stem.conv.weight));
            v.push(("pooling.stem.conv.bias".to_string(), &mut p.stem.conv.bias));
            v.push(("pooling.stem.bn.gamma".to_string(), &mut p.stem.bn.gamma));
            v.push(("pooling.stem.bn.beta".to_string(), &mut p.stem.bn.beta));
            v.push((
                "pooling.stem.bn.running_mean".to_string(),
                &mut p.stem.bn.running_mean,
            ));
            v.push((
                "pooling.stem.bn.running_var".to_string(),
                &mut p.stem.bn.running_var,
            ));
            for (i, s) in p.stages.iter_mut().enumerate() {
                v.push((format!("pooling.stage{}.conv.weight", i), &mut s.conv.weight));
                v.push((format!("pooling.stage{}.conv.bias", i), &mut s.conv.bias));
                v.push((format!("pooling.stage{}.bn.gamma", i), &mut s.bn.gamma));
                v.push((format!("pooling.stage{}.bn.beta", i), &mut s.bn.beta));
                v.push((
                    format!("pooling.stage{}.bn.running_mean", i),
                    &mut s.bn.running_mean,
                ));
                v.push((
                    format!("pooling.stage{}.bn.running_var", i),
                    &mut s.bn.running_var,
                ));
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let c = &mut b.csa;
            v.push((format!("block{}.csa.e_q.weight", i), &mut c.e_q.weight));
            v.push((format!("block{}.csa.e_k.weight", i), &mut c.e_k.weight));
            v.push((format!("block{}.csa.e_v.weight", i), &mut c.e_v.weight));
            v.push((format!("block{}.csa.theta_raw", i), &mut c.theta_raw));
            v.push((format!("block{}.csa.out.conv.weight", i), &mut c.out_proj.conv.weight));
            v.push((format!("block{}.csa.out.conv.bias", i), &mut c.out_proj.conv.bias));
            v.push((format!("block{}.csa.out.bn.gamma", i), &mut c.out_proj.bn.gamma));
            v.push((format!("block{}.csa.out.bn.beta", i), &mut c.out_proj.bn.beta));
            v.push((
                format!("block{}.csa.out.bn.running_mean", i),
                &mut c.out_proj.bn.running_mean,
            ));
            v.push((
                format!("block{}.csa.out.bn.running_var", i),
                &mut c.out_proj.bn.running_var,
            ));
            for (tag, s) in [("stage1", &mut b.cffn.stage1), ("stage2", &mut b.cffn.stage2)] {
                v.push((format!("block{}.cffn.{}.conv.weight", i, tag), &mut s.conv.weight));
                v.push((format!("block{}.cffn.{}.conv.bias", i, tag), &mut s.conv.bias));
                v.push((format!("block{}.cffn.{}.bn.gamma", i, tag), &mut s.bn.gamma));
                v.push((format!("block{}.cffn.{}.bn.beta", i, tag), &mut s.bn.beta));
                v.push((
                    format!("block{}.cffn.{}.bn.running_mean", i, tag),
                    &mut s.bn.running_mean,
                ));
                v.push((
                    format!("block{}.cffn.{}.bn.running_var", i, tag),
                    &mut s.bn.running_var,
                ));
            }
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            v.push((format!("decoder{}.conv.weight", i), &mut d.conv.weight));
            v.push((format!("decoder{}.conv.bias", i), &mut d.conv.bias));
            v.push((format!("decoder{}.bn.gamma", i), &mut d.bn.gamma));
            v.push((format!("decoder{}.bn.beta", i), &mut d.bn.beta));
            v.push((format!("decoder{}.bn.running_mean", i), &mut d.bn.running_mean));
            v.push((format!("decoder{}.bn.running_var", i), &mut d.bn.running_var));
        }
        v.push(("head.weight".to_string(), &mut self.head.weight));
        v.push(("head.bias".to_string(), &mut self.head.bias));
        v
    }

    pub fn param_count(&mut self) -> usize {
        self.param_entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces every state tensor by name; the provided set must match the
    /// model's exactly, including shapes.
    pub fn load_state(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        use std::collections::HashMap;
        let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
        for (name, slot) in self.state_entries() {
            let t = map.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor '{}'", name))
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(name) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{}'", name)));
        }
        Ok(())
    }

    pub fn forward_cached(
        &mut self,
        x: &Tensor,
    ) -> Result<(Tensor, Vec<AttentionField>, ModelCache)> {
        let cfg = &self.config;
        if x.shape() != [cfg.c, cfg.height, cfg.width] {
            return Err(Error::shape(
                "model.forward",
                format!(
                    "input {:?}, configured [{}, {}, {}]",
                    x.shape(),
                    cfg.c,
                    cfg.height,
                    cfg.width
                ),
            ));
        }
        let geom = self.geometry();
        let (mut u, pooling_cache) = pooling_forward(x, &mut self.pooling)?;
        let mut attn_fields = Vec::new();
        let mut block_caches = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (csa_y, attn, csa_cache) = csa_forward(&u, &mut b.csa, &geom)?;
            let u1 = u.add(&csa_y)?;
            let (ff, ff_cache) = cffn_forward(&u1, &mut b.cffn)?;
            u = u1.add(&ff)?;
            if !u.all_finite() {
                return Err(Error::NonFinite(format!("model: block {}", i)));
            }
            attn_fields.push(attn);
            block_caches.push((csa_cache, ff_cache));
        }
        let mut dec_caches = Vec::new();
        for d in self.decoder.iter_mut() {
            let up = upsample_nearest2x(&u)?;
            let (next, cache) = cbr_forward(&up, d)?;
            u = next;
            dec_caches.push(cache);
        }
        let logits = conv2d(&u, &self.head)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("model: head".into()));
        }
        Ok((
            logits,
            attn_fields,
            ModelCache {
                pooling: pooling_cache,
                blocks: block_caches,
                decoder: dec_caches,
                head_input: u,
            },
        ))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Vec<AttentionField>)> {
        let (logits, attn, _) = self.forward_cached(x)?;
        Ok((logits, attn))
    }

    pub fn backward(&self, cache: &ModelCache, grad_logits: &Tensor) -> Result<(Tensor, ModelGrads)> {
        let (mut grad, head_weight, head_bias) =
            conv2d_backward(&cache.head_input, &self.head, grad_logits)?;
        let mut dec_grads = vec![None; self.decoder.len()];
        for (i, (d, c)) in self.decoder.iter().zip(cache.decoder.iter()).enumerate().rev() {
            let (g_up, cg) = cbr_backward(c, d, &grad)?;
            grad = upsample_nearest2x_backward(&g_up)?;
            dec_grads[i] = Some(cg);
        }
        let mut block_grads = vec![None; self.blocks.len()];
        for (i, (b, (csa_cache, ff_cache))) in
            self.blocks.iter().zip(cache.blocks.iter()).enumerate().rev()
        {
            // u2 = u1 + cffn(u1)
            let (g_ff_in, ffg) = cffn_backward(ff_cache, &b.cffn, &grad)?;
            let mut grad_u1 = grad.clone();
            grad_u1.add_scaled_assign(&g_ff_in, 1.0)?;
            // u1 = u + csa(u)
            let (g_csa_in, csag) = csa_backward(csa_cache, &b.csa, &grad_u1)?;
            let mut grad_u = grad_u1;
            grad_u.add_scaled_assign(&g_csa_in, 1.0)?;
            grad = grad_u;
            block_grads[i] = Some((csag, ffg));
        }
        let (gx, pooling_grads) = pooling_backward(&cache.pooling, &self.pooling, &grad)?;
        Ok((
            gx,
            ModelGrads {
                pooling: pooling_grads,
                blocks: block_grads.into_iter().map(|g| g.unwrap()).collect(),
                decoder: dec_grads.into_iter().map(|g| g.unwrap()).collect(),
                head_weight,
                head_bias,
            },
        ))
    }
}

const DICE_SMOOTH: f64 = 1e-6;

/// Cross-entropy and smoothed soft-Dice components of the loss (before the
/// equal-weight average).
pub fn loss_components(logits: &Tensor, target: &[usize]) -> Result<(f64, f64)> {
    let (probs, _, s, pc, gc) = softmax_stats(logits, target)?;
    let classes = logits.shape()[0];
    let pix = target.len();
    let mut ce = 0.0;
    for (x, &t) in target.iter().enumerate() {
        ce -= probs[t * pix + x].ln();
    }
    ce /= pix as f64;
    let mut dice = 0.0;
    for c in 0..classes {
        dice += (2.0 * s[c] + DICE_SMOOTH) / (pc[c] + gc[c] + DICE_SMOOTH);
    }
    let dice_loss = 1.0 - dice / classes as f64;
    Ok((ce, dice_loss))
}

#[allow(clippy::type_complexity)]
fn softmax_stats(
    logits: &Tensor,
    target: &[usize],
) -> Result<(Vec<f64>, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if logits.rank() != 3 {
        return Err(Error::shape(
            "loss",
            format!("logits must be [classes,h,w], got {:?}", logits.shape()),
        ));
    }
    let classes = logits.shape()[0];
    let pix = logits.shape()[1] * logits.shape()[2];
    if target.len() != pix {
        return Err(Error::shape(
            "loss",
            format!("target has {} pixels, logits {}", target.len(), pix),
        ));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= classes) {
        return Err(Error::Invalid(format!(
            "target class {} out of range 0..{}",
            bad, classes
        )));
    }
    let ld = logits.data();
    let mut probs = vec![0.0; classes * pix];
    for x in 0..pix {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..classes {
            mx = mx.max(ld[c * pix + x]);
        }
        let mut z = 0.0;
        for c in 0..classes {
            let e = (ld[c * pix + x] - mx).exp();
            probs[c * pix + x] = e;
            z += e;
        }
        for c in 0..classes {
            probs[c * pix + x] /= z;
        }
    }
    let mut s = vec![0.0; classes];
    let mut pc = vec![0.0; classes];
    let mut gc = vec![0.0; classes];
    for c in 0..classes {
        for x in 0..pix {
            let p = probs[c * pix + x];
            pc[c] += p;
            if target[x] == c {
                s[c] += p;
                gc[c] += 1.0;
            }
        }
    }
    Ok((probs, classes, s, pc, gc))
}

/// Equally weighted mean of softmax cross-entropy and smoothed soft-Dice loss,
/// with the exact gradient w.r.t. the logits.
pub fn loss(logits: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let (probs, classes, s, pc, gc) = softmax_stats(logits, target)?;
    let pix = target.len();
    let (ce, dice_loss) = loss_components(logits, target)?;
    let total = 0.5 * (ce + dice_loss);

    // dL/dp, then chain through the per-pixel softmax
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let inv_pix = 1.0 / pix as f64;
    let inv_classes = 1.0 / classes as f64;
    for x in 0..pix {
        let t = target[x];
        // dL/dp_c at this pixel
        let mut dldp = vec![0.0; classes];
        for (c, slot) in dldp.iter_mut().enumerate() {
            let mut v = 0.0;
            if c == t {
                v -= inv_pix / probs[c * pix + x];
            }
            let u = pc[c] + gc[c] + DICE_SMOOTH;
            let g = if c == t { 1.0 } else { 0.0 };
            // d(dice_loss)/dp = -(1/C) * (2 g u - (2 s + smooth)) / u^2
            v -= inv_classes * (2.0 * g * u - (2.0 * s[c] + DICE_SMOOTH)) / (u * u);
            *slot = 0.5 * v;
        }
        let mut weighted = 0.0;
        for c in 0..classes {
            weighted += dldp[c] * probs[c * pix + x];
        }
        for c in 0..classes {
            let p = probs[c * pix + x];
            gd[c * pix + x] = p * (dldp[c] - weighted);
        }
    }
    Ok((total, grad))
}
