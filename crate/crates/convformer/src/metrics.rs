//! Segmentation quality metrics (Dice overlap, Hausdorff distance) and
//! attention-collapse diagnostics over the per-layer attention fields.

use crate::csa::AttentionField;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-pixel boolean segmentation mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<BinaryMask> {
        if h == 0 || w == 0 {
            return Err(Error::Invalid("mask extents must be positive".into()));
        }
        if bits.len() != h * w {
            return Err(Error::shape(
                "mask",
                format!("{} bits for {}x{} mask", bits.len(), h, w),
            ));
        }
        Ok(BinaryMask { h, w, bits })
    }

    /// Mask of the pixels labelled `class` in a row-major label map.
    pub fn from_labels(labels: &[usize], h: usize, w: usize, class: usize) -> Result<BinaryMask> {
        if labels.len() != h * w {
            return Err(Error::shape(
                "mask",
                format!("{} labels for {}x{} mask", labels.len(), h, w),
            ));
        }
        BinaryMask::new(h, w, labels.iter().map(|&l| l == class).collect())
    }

    /// Mask of the argmax-predicted pixels of `class` in a logits map.
    pub fn from_logits(logits: &Tensor, class: usize) -> Result<BinaryMask> {
        if logits.rank() != 3 {
            return Err(Error::shape(
                "mask",
                format!("logits must be [classes,h,w], got {:?}", logits.shape()),
            ));
        }
        let (classes, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        if class >= classes {
            return Err(Error::Invalid(format!(
                "class {} out of range 0..{}",
                class, classes
            )));
        }
        let pix = h * w;
        let d = logits.data();
        let mut bits = vec![false; pix];
        for (x, bit) in bits.iter_mut().enumerate() {
            let mut best = 0;
            for c in 1..classes {
                if d[c * pix + x] > d[best * pix + x] {
                    best = c;
                }
            }
            *bit = best == class;
        }
        BinaryMask::new(h, w, bits)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for i in 0..self.h {
            for j in 0..self.w {
                if self.bits[i * self.w + j] {
                    pts.push((i as f64, j as f64));
                }
            }
        }
        pts
    }
}

fn check_extents(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::shape(
            "metrics",
            format!("masks {}x{} vs {}x{}", a.h, a.w, b.h, b.w),
        ));
    }
    Ok(())
}

/// Dice overlap 2|P∩G| / (|P|+|G|); 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_extents(pred, gt)?;
    let inter = pred
        .bits
        .iter()
        .zip(gt.bits.iter())
        .filter(|(&p, &g)| p && g)
        .count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Symmetric Hausdorff distance in pixels (Euclidean point-set distance).
/// `None` when either mask is empty: the distance is undefined there and must
/// never be silently reported as zero.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    check_extents(pred, gt)?;
    let p = pred.points();
    let g = gt.points();
    if p.is_empty() || g.is_empty() {
        return Ok(None);
    }
    Ok(Some(directed(&p, &g).max(directed(&g, &p)).sqrt()))
}

/// sup over `from` of the squared distance to the nearest point of `to`.
fn directed(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    let mut worst = 0.0f64;
    for &(pi, pj) in from {
        let mut best = f64::INFINITY;
        for &(gi, gj) in to {
            let d = (pi - gi) * (pi - gi) + (pj - gj) * (pj - gj);
            if d < best {
                best = d;
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Per-query-pixel attention map of `field`, concatenated across heads.
fn pixel_map(field: &AttentionField, i: usize, j: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for head in &field.heads {
        let (h, w) = (head.field.shape()[2], head.field.shape()[3]);
        for m in 0..h {
            for n in 0..w {
                v.push(head.field.at4(i, j, m, n));
            }
        }
    }
    v
}

fn field_grid(field: &AttentionField) -> (usize, usize) {
    let f = &field.heads[0].field;
    (f.shape()[0], f.shape()[1])
}

/// Mean over query pixels of the cosine similarity between the two fields'
/// per-pixel attention maps. Identical pixel maps score 1 exactly.
pub fn attention_similarity(a: &AttentionField, b: &AttentionField) -> Result<f64> {
    if a.heads.len() != b.heads.len() {
        return Err(Error::shape(
            "attention_similarity",
            format!("{} heads vs {}", a.heads.len(), b.heads.len()),
        ));
    }
    for (ha, hb) in a.heads.iter().zip(b.heads.iter()) {
        if ha.field.shape() != hb.field.shape() {
            return Err(Error::shape(
                "attention_similarity",
                format!("{:?} vs {:?}", ha.field.shape(), hb.field.shape()),
            ));
        }
    }
    let (h, w) = field_grid(a);
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let va = pixel_map(a, i, j);
            let vb = pixel_map(b, i, j);
            total += cosine(&va, &vb);
        }
    }
    Ok(total / (h * w) as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Number of mask entries `M[i,j,m,n] >= tau` per query pixel, plus the grid
/// mean. `mask` is the rank-4 Gaussian mask factor of one head.
pub fn receptive_field_size(mask: &Tensor, tau: f64) -> Result<(Vec<usize>, f64)> {
    if mask.rank() != 4 {
        return Err(Error::shape(
            "receptive_field_size",
            format!("mask must be rank 4, got {:?}", mask.shape()),
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("tau must be in (0,1), got {}", tau)));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let per = h * w;
    let mut counts = vec![0usize; per];
    let d = mask.data();
    for (p, slot) in counts.iter_mut().enumerate() {
        *slot = d[p * per..(p + 1) * per].iter().filter(|&&v| v >= tau).count();
    }
    let mean = counts.iter().sum::<usize>() as f64 / per as f64;
    Ok((counts, mean))
}

/// Diagnostics for attention collapse: per-consecutive-layer-pair similarity,
/// a scalar score in [0,1], and per-layer diversity (mean pairwise Euclidean
/// distance between per-pixel attention maps).
#[derive(Clone, Debug)]
pub struct CollapseReport {
    pub pair_similarity: Vec<f64>,
    pub collapse_score: f64,
    pub layer_diversity: Vec<f64>,
}

pub fn collapse_report(fields: &[AttentionField]) -> Result<CollapseReport> {
    let mut pair_similarity = Vec::new();
    for pair in fields.windows(2) {
        pair_similarity.push(attention_similarity(&pair[0], &pair[1])?);
    }
    let collapse_score = if pair_similarity.is_empty() {
        0.0
    } else {
        pair_similarity.iter().map(|s| s.max(0.0)).sum::<f64>() / pair_similarity.len() as f64
    };
    let mut layer_diversity = Vec::new();
    for f in fields {
        layer_diversity.push(diversity(f));
    }
    Ok(CollapseReport {
        pair_similarity,
        collapse_score,
        layer_diversity,
    })
}

/// Mean Euclidean distance over unordered pairs of distinct query pixels.
fn diversity(field: &AttentionField) -> f64 {
    let (h, w) = field_grid(field);
    let pix = h * w;
    let maps: Vec<Vec<f64>> = (0..pix)
        .map(|p| pixel_map(field, p / w, p % w))
        .collect();
    if pix < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..pix {
        for b in (a + 1)..pix {
            let d: f64 = maps[a]
                .iter()
                .zip(&maps[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    total / pairs as f64
}
