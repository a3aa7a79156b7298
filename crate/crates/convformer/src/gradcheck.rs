//! Central finite-difference gradient oracle. The numeric side never calls an
//! analytic backward pass; it only re-evaluates the forward map, so it stays
//! independent of the code it validates.

use crate::{Error, Result, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

/// Coordinates where analytic and numeric values agree within this absolute
/// bound pass regardless of relative error. Central differences of an O(1)
/// function carry ~1e-11 of cancellation noise at h = 1e-5, which would
/// otherwise dominate the relative error of exactly-zero gradients (e.g. a
/// conv bias feeding a training-mode batch norm, whose mean subtraction
/// cancels any per-channel constant shift).
pub const ABS_AGREEMENT: f64 = 1e-8;

/// |a - b| / max(|a|, |b|, 1e-8)
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences (f(p + h e_k) - f(p - h e_k)) / (2h) per coordinate.
pub fn finite_diff(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; point.len()];
    let mut p = point.to_vec();
    for k in 0..point.len() {
        p[k] = point[k] + h;
        let fp = f(&p)?;
        p[k] = point[k] - h;
        let fm = f(&p)?;
        p[k] = point[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff: coordinate {} produced a non-finite value",
                k
            )));
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradReport {
    pub fn new(tolerance: f64) -> GradReport {
        GradReport {
            tolerance,
            checks: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,max_rel_error,max_abs_error,worst_index,pass\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.name, c.max_rel, c.max_abs, c.worst_index, c.pass
            ));
        }
        out
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gradient check, tolerance {:e}", self.tolerance)?;
        for c in &self.checks {
            writeln!(
                f,
                "  {:<42} max_rel {:>12.4e}  max_abs {:>12.4e}  [{}]  {}",
                c.name,
                c.max_rel,
                c.max_abs,
                c.worst_index,
                if c.pass { "PASS" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "overall: {}",
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

/// Elementwise comparison of an analytic gradient against a numeric estimate.
pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64], tol: f64) -> ParamCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel = 0.0;
    let mut max_abs = 0.0;
    let mut worst = 0;
    for (k, (&a, &b)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let d = (a - b).abs();
        // absolute agreement overrides the relative criterion
        let r = if d <= ABS_AGREEMENT { 0.0 } else { rel_err(a, b) };
        if r > max_rel {
            max_rel = r;
            worst = k;
        }
        if d > max_abs {
            max_abs = d;
        }
    }
    // a zero-length parameter trivially passes
    ParamCheck {
        name: name.into(),
        max_rel,
        max_abs,
        worst_index: worst,
        pass: max_rel <= tol,
    }
}

/// Checks one named parameter: runs the finite-difference estimate of `eval`
/// around `point` and compares against `analytic`.
pub fn check(
    name: impl Into<String>,
    analytic: &[f64],
    eval: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    h: f64,
    tol: f64,
) -> Result<ParamCheck> {
    let fd = finite_diff(eval, point, h)?;
    Ok(compare(name, analytic, &fd, tol))
}

// ---------------------------------------------------------------------------
// Standard suite over every differentiable operation

use crate::cffn::{cffn_backward, cffn_forward, CffnParams};
use crate::csa::{csa_backward, csa_forward, CsaParams, Geometry};
use crate::model::{ConvFormerConfig, SegModel};
use crate::pooling::{pooling_backward, pooling_forward, PoolingParams};
use crate::tensor::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, BatchNormState, ConvParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Nudge values away from the ReLU/max kinks so the central difference stays
/// on one side of every non-smooth point.
fn desaturate(t: &mut Tensor, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v += if *v >= 0.0 { margin } else { -margin };
        }
    }
}

/// Runs the whole gradient suite on seeded random instances (grids <= 8x8):
/// conv2d, maxpool2x2, batchnorm, relu, pooling_forward, csa_forward,
/// cffn_forward, and the end-to-end model forward + loss.
pub fn run_suite(seed: u64) -> Result<GradReport> {
    let tol = 1e-5;
    let tol_model = 1e-4;
    let h = DEFAULT_STEP;
    let mut report = GradReport::new(tol);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // conv2d
    {
        let x = Tensor::randn(&[3, 6, 6], 1.0, &mut rng);
        let p = ConvParams::he_init(4, 3, 3, &mut rng);
        let r = Tensor::randn(&[4, 6, 6], 1.0, &mut rng);
        let (gx, gw, gb) = conv2d_backward(&x, &p, &r)?;
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            Ok(dot(&conv2d(&x2, &p)?, &r))
        };
        report
            .checks
            .push(check("conv2d.input", gx.data(), &mut fx, x.data(), h, tol)?);
        let mut fw = |pt: &[f64]| {
            let mut p2 = p.clone();
            p2.weight.data_mut().copy_from_slice(pt);
            Ok(dot(&conv2d(&x, &p2)?, &r))
        };
        report.checks.push(check(
            "conv2d.weight",
            gw.data(),
            &mut fw,
            p.weight.data(),
            h,
            tol,
        )?);
        let mut fb = |pt: &[f64]| {
            let mut p2 = p.clone();
            p2.bias.data_mut().copy_from_slice(pt);
            Ok(dot(&conv2d(&x, &p2)?, &r))
        };
        report.checks.push(check(
            "conv2d.bias",
            gb.data(),
            &mut fb,
            p.bias.data(),
            h,
            tol,
        )?);
    }

    // maxpool2x2
    {
        let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
        let (y, arg) = maxpool2x2(&x)?;
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let gx = maxpool2x2_backward(x.shape(), &arg, &r);
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            let (y2, _) = maxpool2x2(&x2)?;
            Ok(dot(&y2, &r))
        };
        report.checks.push(check(
            "maxpool2x2.input",
            gx.data(),
            &mut fx,
            x.data(),
            h,
            tol,
        )?);
    }

    // batchnorm (training mode)
    {
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut s = BatchNormState::new(3);
        s.gamma = Tensor::randn(&[3], 0.2, &mut rng);
        s.gamma.data_mut().iter_mut().for_each(|v| *v += 1.0);
        s.beta = Tensor::randn(&[3], 0.2, &mut rng);
        let (y, cache) = batchnorm(&x, &mut s.clone())?;
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let (gx, ggamma, gbeta) = batchnorm_backward(&cache, &s, &r)?;
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            let (y2, _) = batchnorm(&x2, &mut s.clone())?;
            Ok(dot(&y2, &r))
        };
        report.checks.push(check(
            "batchnorm.input",
            gx.data(),
            &mut fx,
            x.data(),
            h,
            tol,
        )?);
        let mut fg = |pt: &[f64]| {
            let mut s2 = s.clone();
            s2.gamma.data_mut().copy_from_slice(pt);
            let (y2, _) = batchnorm(&x, &mut s2)?;
            Ok(dot(&y2, &r))
        };
        report.checks.push(check(
            "batchnorm.gamma",
            ggamma.data(),
            &mut fg,
            s.gamma.data(),
            h,
            tol,
        )?);
        let mut fb = |pt: &[f64]| {
            let mut s2 = s.clone();
            s2.beta.data_mut().copy_from_slice(pt);
            let (y2, _) = batchnorm(&x, &mut s2)?;
            Ok(dot(&y2, &r))
        };
        report.checks.push(check(
            "batchnorm.beta",
            gbeta.data(),
            &mut fb,
            s.beta.data(),
            h,
            tol,
        )?);
    }

    // relu
    {
        let mut x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        desaturate(&mut x, 1e-3);
        let r = Tensor::randn(x.shape(), 1.0, &mut rng);
        let gx = relu_backward(&x, &r);
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            Ok(dot(&relu(&x2), &r))
        };
        report
            .checks
            .push(check("relu.input", gx.data(), &mut fx, x.data(), h, tol)?);
    }

    // pooling_forward
    {
        let params = PoolingParams::build(2, 3, 2, &mut rng)?;
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let (y, cache) = pooling_forward(&x, &mut params.clone())?;
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let (gx, grads) = pooling_backward(&cache, &params, &r)?;
        let scalar = |p2: &mut PoolingParams, x2: &Tensor| -> Result<f64> {
            let (y2, _) = pooling_forward(x2, p2)?;
            Ok(dot(&y2, &r))
        };
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            scalar(&mut params.clone(), &x2)
        };
        report.checks.push(check(
            "pooling_forward.input",
            gx.data(),
            &mut fx,
            x.data(),
            h,
            tol,
        )?);
        for (name, g) in grads.flat() {
            let point = {
                let mut pc = params.clone();
                let entries = pc.param_entries();
                entries
                    .into_iter()
                    .find(|(n, _)| n == &name)
                    .map(|(_, t)| t.data().to_vec())
                    .unwrap()
            };
            let mut fp = |pt: &[f64]| {
                let mut p2 = params.clone();
                {
                    let mut entries = p2.param_entries();
                    let slot = entries.iter_mut().find(|(n, _)| n == &name).unwrap();
                    slot.1.data_mut().copy_from_slice(pt);
                }
                scalar(&mut p2, &x)
            };
            report.checks.push(check(
                format!("pooling_forward.{}", name),
                g.data(),
                &mut fp,
                &point,
                h,
                tol,
            )?);
        }
    }

    // csa_forward (all params including theta_raw)
    {
        let geom = Geometry {
            d: 2,
            input_h: 16,
            input_w: 16,
        };
        let mut params = CsaParams::build(4, 4, 1, 0.7, &mut rng)?;
        params.theta_raw = Tensor::filled(&[1], -1.5);
        let x = Tensor::randn(&[4, 4, 4], 1.0, &mut rng);
        let (y, _, cache) = csa_forward(&x, &mut params.clone(), &geom)?;
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let (gx, grads) = csa_backward(&cache, &params, &r)?;
        let scalar = |p2: &mut CsaParams, x2: &Tensor| -> Result<f64> {
            let (y2, _, _) = csa_forward(x2, p2, &geom)?;
            Ok(dot(&y2, &r))
        };
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            scalar(&mut params.clone(), &x2)
        };
        report.checks.push(check(
            "csa_forward.input",
            gx.data(),
            &mut fx,
            x.data(),
            h,
            tol,
        )?);
        for (name, g) in grads.flat() {
            let point = {
                let mut pc = params.clone();
                let entries = pc.param_entries();
                entries
                    .into_iter()
                    .find(|(n, _)| n == &name)
                    .map(|(_, t)| t.data().to_vec())
                    .unwrap()
            };
            let mut fp = |pt: &[f64]| {
                let mut p2 = params.clone();
                {
                    let mut entries = p2.param_entries();
                    let slot = entries.iter_mut().find(|(n, _)| n == &name).unwrap();
                    slot.1.data_mut().copy_from_slice(pt);
                }
                scalar(&mut p2, &x)
            };
            report.checks.push(check(
                format!("csa_forward.{}", name),
                g.data(),
                &mut fp,
                &point,
                h,
                tol,
            )?);
        }
    }

    // cffn_forward
    {
        let params = CffnParams::build(3, 5, &mut rng);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let (y, cache) = cffn_forward(&x, &mut params.clone())?;
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let (gx, grads) = cffn_backward(&cache, &params, &r)?;
        let scalar = |p2: &mut CffnParams, x2: &Tensor| -> Result<f64> {
            let (y2, _) = cffn_forward(x2, p2)?;
            Ok(dot(&y2, &r))
        };
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            scalar(&mut params.clone(), &x2)
        };
        report.checks.push(check(
            "cffn_forward.input",
            gx.data(),
            &mut fx,
            x.data(),
            h,
            tol,
        )?);
        for (name, g) in grads.flat() {
            let point = {
                let mut pc = params.clone();
                let entries = pc.param_entries();
                entries
                    .into_iter()
                    .find(|(n, _)| n == &name)
                    .map(|(_, t)| t.data().to_vec())
                    .unwrap()
            };
            let mut fp = |pt: &[f64]| {
                let mut p2 = params.clone();
                {
                    let mut entries = p2.param_entries();
                    let slot = entries.iter_mut().find(|(n, _)| n == &name).unwrap();
                    slot.1.data_mut().copy_from_slice(pt);
                }
                scalar(&mut p2, &x)
            };
            report.checks.push(check(
                format!("cffn_forward.{}", name),
                g.data(),
                &mut fp,
                &point,
                h,
                tol,
            )?);
        }
    }

    // end-to-end model forward + loss (looser tolerance)
    {
        let config = ConvFormerConfig {
            c: 2,
            c_m: 4,
            c_q: 4,
            c_h: 6,
            patch_size: 4,
            alpha: 0.8,
            heads: 1,
            layers: 1,
            num_classes: 2,
            height: 16,
            width: 16,
        };
        let model = SegModel::build(&config, seed ^ 0x5eed)?;
        let x = Tensor::randn(&[2, 16, 16], 1.0, &mut rng);
        let target: Vec<usize> = (0..16 * 16).map(|_| rng.gen_range(0..2usize)).collect();
        let scalar = |m2: &mut SegModel, x2: &Tensor| -> Result<f64> {
            let (logits, _, _) = m2.forward_cached(x2)?;
            let (l, _) = crate::model::loss(&logits, &target)?;
            Ok(l)
        };
        let (loss_grads, gx) = {
            let mut m = model.clone();
            let (logits, _, cache) = m.forward_cached(&x)?;
            let (_, grad_logits) = crate::model::loss(&logits, &target)?;
            let (gx, grads) = m.backward(&cache, &grad_logits)?;
            (grads, gx)
        };
        let mut fx = |pt: &[f64]| {
            let x2 = Tensor::from_vec(x.shape(), pt.to_vec())?;
            scalar(&mut model.clone(), &x2)
        };
        report.checks.push({
            let mut c = check("model.input", gx.data(), &mut fx, x.data(), h, tol_model)?;
            c.pass = c.max_rel <= tol_model;
            c
        });
        for (name, g) in loss_grads.flat() {
            let point = {
                let mut mc = model.clone();
                let entries = mc.param_entries();
                entries
                    .into_iter()
                    .find(|(n, _)| n == &name)
                    .map(|(_, t)| t.data().to_vec())
                    .unwrap()
            };
            let mut fp = |pt: &[f64]| {
                let mut m2 = model.clone();
                {
                    let mut entries = m2.param_entries();
                    let slot = entries.iter_mut().find(|(n, _)| n == &name).unwrap();
                    slot.1.data_mut().copy_from_slice(pt);
                }
                scalar(&mut m2, &x)
            };
            let mut c = check(format!("model.{}", name), g.data(), &mut fp, &point, h, tol_model)?;
            c.pass = c.max_rel <= tol_model;
            report.checks.push(c);
        }
    }

    Ok(report)
}
