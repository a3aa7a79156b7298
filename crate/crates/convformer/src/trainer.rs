//! Toy-scale training harness: synthetic blob segmentation data, the four
//! standard augmentations (rotation, scaling, contrast, gamma), Adam, the
//! training/evaluation loop, and the alpha-ablation sweep.

use crate::io::save_checkpoint;
use crate::metrics::{collapse_report, dice, hausdorff, BinaryMask};
use crate::model::{loss, ConvFormerConfig, ModelGrads, SegModel};
use crate::tensor::{BnMode, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Recipe for the synthetic dataset: one ellipse or rectangle per image with
/// probability `fg_prob`, drawn over correlated background noise.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub num_classes: usize,
    /// Probability that an image contains a foreground shape at all.
    pub fg_prob: f64,
    /// Half-extent range of the shapes, in pixels.
    pub r_min: f64,
    pub r_max: f64,
    /// Standard deviation of the smoothed additive noise.
    pub noise: f64,
}

impl Default for DataSpec {
    fn default() -> DataSpec {
        DataSpec {
            num_classes: 2,
            fg_prob: 0.9,
            r_min: 6.0,
            r_max: 12.0,
            noise: 0.04,
        }
    }
}

impl DataSpec {
    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid("data spec needs at least 2 classes".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_prob) {
            return Err(Error::Invalid(format!(
                "fg_prob must be in [0,1], got {}",
                self.fg_prob
            )));
        }
        let limit = (h.min(w) as f64) / 2.0 - 1.0;
        if !(self.r_min > 0.0 && self.r_min <= self.r_max && self.r_max < limit) {
            return Err(Error::Invalid(format!(
                "shape half-extents must satisfy 0 < r_min <= r_max < {}, got [{}, {}]",
                limit, self.r_min, self.r_max
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Invalid("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Expected foreground pixel count per image. With pixel centers counted
    /// inside a randomly placed closed shape, the expected count equals the
    /// shape's real area: pi*a*b for ellipses, 4ab for rectangles, averaged
    /// over the 50/50 shape choice and the independent uniform half-extents.
    pub fn expected_fg_area(&self) -> f64 {
        let m = 0.5 * (self.r_min + self.r_max);
        self.fg_prob * 0.5 * (std::f64::consts::PI + 4.0) * m * m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub mask: Vec<usize>,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn h(&self) -> usize {
        self.image.shape()[1]
    }
    pub fn w(&self) -> usize {
        self.image.shape()[2]
    }
}

pub fn gen_dataset(
    n: usize,
    h: usize,
    w: usize,
    spec: &DataSpec,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be positive".into()));
    }
    spec.validate(h, w)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let sample_seed = master.gen::<u64>();
        out.push(gen_sample(h, w, spec, sample_seed));
    }
    Ok(out)
}

fn gen_sample(h: usize, w: usize, spec: &DataSpec, seed: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0usize; h * w];
    if rng.gen::<f64>() < spec.fg_prob {
        let class = if spec.num_classes == 2 {
            1
        } else {
            rng.gen_range(1..spec.num_classes)
        };
        let a = rng.gen_range(spec.r_min..=spec.r_max);
        let b = rng.gen_range(spec.r_min..=spec.r_max);
        let ci = rng.gen_range(spec.r_max + 1.0..(h as f64 - spec.r_max - 1.0));
        let cj = rng.gen_range(spec.r_max + 1.0..(w as f64 - spec.r_max - 1.0));
        let ellipse = rng.gen::<bool>();
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - ci;
                let dx = j as f64 - cj;
                let inside = if ellipse {
                    (dy / a) * (dy / a) + (dx / b) * (dx / b) <= 1.0
                } else {
                    dy.abs() <= a && dx.abs() <= b
                };
                if inside {
                    mask[i * w + j] = class;
                }
            }
        }
    }
    // correlated noise: white noise smoothed with a 3x3 box filter
    let white: Vec<f64> = (0..h * w)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let mut image = Tensor::zeros(&[1, h, w]);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = i as i64 + di;
                    let jj = j as i64 + dj;
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                        acc += white[ii as usize * w + jj as usize];
                        cnt += 1.0;
                    }
                }
            }
            let class = mask[i * w + j];
            let base = if class == 0 {
                0.3
            } else {
                0.4 + 0.5 * class as f64 / (spec.num_classes - 1) as f64
            };
            let v = (base + spec.noise * acc / cnt).clamp(0.0, 1.0);
            image.set3(0, i, j, v);
        }
    }
    SyntheticSample { image, mask, seed }
}

/// Parameter ranges for the four augmentations.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRanges {
    pub rot_deg: f64,
    pub scale: (f64, f64),
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> AugmentRanges {
        AugmentRanges {
            rot_deg: 25.0,
            scale: (0.9, 1.1),
            contrast: (0.7, 1.3),
            gamma: (0.7, 1.5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub scale: f64,
    pub contrast: f64,
    pub gamma: f64,
}

pub fn augment(sample: &SyntheticSample, ranges: &AugmentRanges, rng: &mut impl Rng) -> SyntheticSample {
    let params = AugmentParams {
        angle_deg: rng.gen_range(-ranges.rot_deg..=ranges.rot_deg),
        scale: rng.gen_range(ranges.scale.0..=ranges.scale.1),
        contrast: rng.gen_range(ranges.contrast.0..=ranges.contrast.1),
        gamma: rng.gen_range(ranges.gamma.0..=ranges.gamma.1),
    };
    apply_augment(sample, &params)
}

/// Snap near-cardinal sines/cosines so that multiples of 90 degrees become
/// exact index permutations.
fn snapped_trig(angle_deg: f64) -> (f64, f64) {
    let rad = angle_deg.to_radians();
    let snap = |v: f64| {
        for target in [-1.0, 0.0, 1.0] {
            if (v - target).abs() < 1e-12 {
                return target;
            }
        }
        v
    };
    (snap(rad.sin()), snap(rad.cos()))
}

pub fn apply_augment(sample: &SyntheticSample, p: &AugmentParams) -> SyntheticSample {
    let (h, w) = (sample.h(), sample.w());
    let (sin, cos) = snapped_trig(p.angle_deg);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut image = Tensor::zeros(&[1, h, w]);
    let mut mask = vec![0usize; h * w];
    for i in 0..h {
        for j in 0..w {
            // inverse map: rotate by -angle, undo the scale
            let y = i as f64 - cy;
            let x = j as f64 - cx;
            let si = (cos * y + sin * x) / p.scale + cy;
            let sj = (-sin * y + cos * x) / p.scale + cx;
            image.set3(0, i, j, bilinear(&sample.image, si, sj));
            let ni = si.round() as i64;
            let nj = sj.round() as i64;
            if ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w {
                mask[i * w + j] = sample.mask[ni as usize * w + nj as usize];
            }
        }
    }
    // photometric transforms apply to the image only
    if p.contrast != 1.0 {
        let mean = image.data().iter().sum::<f64>() / image.len() as f64;
        for v in image.data_mut() {
            *v = (p.contrast * (*v - mean) + mean).clamp(0.0, 1.0);
        }
    }
    if p.gamma != 1.0 {
        for v in image.data_mut() {
            *v = v.clamp(0.0, 1.0).powf(p.gamma);
        }
    }
    SyntheticSample {
        image,
        mask,
        seed: sample.seed,
    }
}

fn bilinear(image: &Tensor, si: f64, sj: f64) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let i0 = si.floor();
    let j0 = sj.floor();
    let fi = si - i0;
    let fj = sj - j0;
    let mut acc = 0.0;
    for (di, wi) in [(0.0, 1.0 - fi), (1.0, fi)] {
        for (dj, wj) in [(0.0, 1.0 - fj), (1.0, fj)] {
            if wi == 0.0 || wj == 0.0 {
                continue;
            }
            let ii = (i0 + di) as i64;
            let jj = (j0 + dj) as i64;
            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                acc += wi * wj * image.at3(0, ii as usize, jj as usize);
            }
        }
    }
    acc
}

/// Bias-corrected Adam over the model's named parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &mut SegModel, lr: f64) -> AdamState {
        let entries = model.param_entries();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            names: entries.iter().map(|(n, _)| n.clone()).collect(),
            m: entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

pub fn adam_step(model: &mut SegModel, grads: &ModelGrads, state: &mut AdamState) -> Result<()> {
    let params = model.param_entries();
    let flat = grads.flat();
    if params.len() != flat.len() || params.len() != state.names.len() {
        return Err(Error::Invalid("optimizer/parameter set mismatch".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (idx, ((pname, param), (gname, grad))) in params.into_iter().zip(flat).enumerate() {
        if pname != gname || param.shape() != grad.shape() {
            return Err(Error::Invalid(format!(
                "optimizer entry mismatch: {} vs {}",
                pname, gname
            )));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", pname)));
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = param.data_mut();
        let g = grad.data();
        for k in 0..p.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub dice: f64,
    pub hd: Option<f64>,
    pub collapse_score: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,loss,dice,hd,collapse_score\n");
    for r in rows {
        let hd = match r.hd {
            Some(v) => format!("{}", v),
            None => "NA".to_string(),
        };
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.loss, r.dice, hd, r.collapse_score
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many epochs (when an output directory is given).
    pub checkpoint_every: usize,
    pub augment: Option<AugmentRanges>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 400,
            batch_size: 4,
            lr: 1e-4,
            max_steps: None,
            checkpoint_every: 50,
            augment: Some(AugmentRanges::default()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub steps: usize,
}

/// Mean Dice over all non-background classes of one prediction.
fn eval_dice(logits: &Tensor, mask: &[usize], num_classes: usize, h: usize, w: usize) -> Result<f64> {
    let mut total = 0.0;
    for class in 1..num_classes {
        let pred = BinaryMask::from_logits(logits, class)?;
        let gt = BinaryMask::from_labels(mask, h, w, class)?;
        total += dice(&pred, &gt)?;
    }
    Ok(total / (num_classes - 1) as f64)
}

fn evaluate(
    model: &mut SegModel,
    val: &[SyntheticSample],
    num_classes: usize,
) -> Result<(f64, Option<f64>, f64)> {
    model.set_mode(BnMode::Inference);
    let mut dice_sum = 0.0;
    let mut hd_sum = 0.0;
    let mut hd_count = 0usize;
    let mut collapse = 0.0;
    for s in val {
        let (logits, attn) = model.forward(&s.image)?;
        let (h, w) = (s.h(), s.w());
        dice_sum += eval_dice(&logits, &s.mask, num_classes, h, w)?;
        for class in 1..num_classes {
            let pred = BinaryMask::from_logits(&logits, class)?;
            let gt = BinaryMask::from_labels(&s.mask, h, w, class)?;
            if let Some(d) = hausdorff(&pred, &gt)? {
                hd_sum += d;
                hd_count += 1;
            }
        }
        collapse = collapse_report(&attn)?.collapse_score;
    }
    model.set_mode(BnMode::Training);
    let n = val.len() as f64;
    let hd = if hd_count > 0 { Some(hd_sum / hd_count as f64) } else { None };
    Ok((dice_sum / n, hd, collapse))
}

pub fn train(
    model: &mut SegModel,
    train_set: &[SyntheticSample],
    val_set: &[SyntheticSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("train and validation sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let num_classes = model.config.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamState::new(model, cfg.lr);
    model.set_mode(BnMode::Training);
    let mut history = Vec::new();
    let mut steps = 0usize;
    let mut last_good: Option<SegModel> = None;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        // Fisher-Yates on the epoch RNG stream keeps batch order deterministic
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_loss = 0.0;
            let mut acc: Option<ModelGrads> = None;
            for &idx in batch {
                let sample = match &cfg.augment {
                    Some(r) => augment(&train_set[idx], r, &mut rng),
                    None => train_set[idx].clone(),
                };
                let (logits, _, cache) = model.forward_cached(&sample.image)?;
                let (l, grad_logits) = loss(&logits, &sample.mask)?;
                if !l.is_finite() {
                    if let (Some(dir), Some(good)) = (out_dir, last_good.as_mut()) {
                        save_checkpoint(good, &dir.join("last_good.cfrm"))?;
                    }
                    return Err(Error::Diverged { step: steps });
                }
                batch_loss += l;
                let (_, grads) = model.backward(&cache, &grad_logits)?;
                match &mut acc {
                    Some(a) => a.add_assign(&grads)?,
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            adam_step(model, &grads, &mut opt)?;
            last_good = Some(model.clone());
            steps += 1;
            epoch_loss += batch_loss / batch.len() as f64;
            epoch_batches += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                let (d, hd, collapse) = evaluate(model, val_set, num_classes)?;
                history.push(HistoryRow {
                    epoch,
                    loss: epoch_loss / epoch_batches as f64,
                    dice: d,
                    hd,
                    collapse_score: collapse,
                });
                break 'epochs;
            }
        }
        let (d, hd, collapse) = evaluate(model, val_set, num_classes)?;
        history.push(HistoryRow {
            epoch,
            loss: epoch_loss / epoch_batches as f64,
            dice: d,
            hd,
            collapse_score: collapse,
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &dir.join(format!("ckpt_epoch{}.cfrm", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("final.cfrm"))?;
    }
    Ok(TrainOutcome { history, steps })
}

/// Trains one model per alpha on the shared dataset and reports the final
/// held-out Dice for each.
pub fn ablate_alpha(
    base: &ConvFormerConfig,
    train_set: &[SyntheticSample],
    val_set: &[SyntheticSample],
    cfg: &TrainConfig,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if alphas.is_empty() {
        return Err(Error::Invalid("alpha grid must be non-empty".into()));
    }
    let mut out = Vec::new();
    for &alpha in alphas {
        let config = ConvFormerConfig { alpha, ..base.clone() };
        let mut model = SegModel::build(&config, seed)?;
        let outcome = train(&mut model, train_set, val_set, cfg, None, seed)?;
        let final_dice = outcome.history.last().map(|r| r.dice).unwrap_or(0.0);
        out.push((alpha, final_dice));
    }
    Ok(out)
}

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

pub fn ablation_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("alpha,dice\n");
    for (alpha, d) in rows {
        s.push_str(&format!("{},{}\n", alpha, d));
    }
    s
}
