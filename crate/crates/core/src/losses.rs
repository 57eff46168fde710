//! Cycle-consistency losses for super-resolution, least-squares adversarial
//! losses and their weighted totals.
//!
//! Every loss comes in two flavours: a plain value and a `*_grad` variant that
//! also returns the gradient with respect to the generated grid, so that the
//! trainer can pull it back through the generator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{avg_pool_f, ensure_same_dims, mse, nn_upsample_g, Grid2D, ScaleFactor};
use crate::quality::{ssim, ssim_grad_y, SsimParams};

/// Default clamp applied to SSIM before taking its reciprocal.
pub const DEFAULT_SSIM_EPS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_down: f64,
    pub w_up: f64,
    pub w_ssim_c: f64,
    pub w_ssim_m: f64,
    /// Weight of the classic two-hop cycle term (baseline mode only).
    pub w_cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_adv: 1.0,
            w_down: 10.0,
            w_up: 10.0,
            w_ssim_c: 1.0,
            w_ssim_m: 1.0,
            w_cycle: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            w_adv: 0.0,
            w_down: 0.0,
            w_up: 0.0,
            w_ssim_c: 0.0,
            w_ssim_m: 0.0,
            w_cycle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_adv", self.w_adv),
            ("w_down", self.w_down),
            ("w_up", self.w_up),
            ("w_ssim_c", self.w_ssim_c),
            ("w_ssim_m", self.w_ssim_m),
            ("w_cycle", self.w_cycle),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "loss weight {name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Generator-side loss terms. Terms a training mode does not use are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorTerms {
    pub adv_g1: f64,
    pub adv_g2: f64,
    pub downsample: Option<f64>,
    pub upsample: Option<f64>,
    pub clinical_ssim: Option<f64>,
    pub micro_ssim: Option<f64>,
    pub cycle: Option<f64>,
}

/// Per-step loss telemetry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g1: f64,
    pub adv_g2: f64,
    pub adv_d1: f64,
    pub adv_d2: f64,
    pub downsample: Option<f64>,
    pub upsample: Option<f64>,
    pub clinical_ssim: Option<f64>,
    pub micro_ssim: Option<f64>,
    pub cycle: Option<f64>,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn from_terms(terms: &GeneratorTerms, adv_d1: f64, adv_d2: f64, w: &LossWeights) -> Result<Self> {
        Ok(LossReport {
            adv_g1: terms.adv_g1,
            adv_g2: terms.adv_g2,
            adv_d1,
            adv_d2,
            downsample: terms.downsample,
            upsample: terms.upsample,
            clinical_ssim: terms.clinical_ssim,
            micro_ssim: terms.micro_ssim,
            cycle: terms.cycle,
            total_g: total_generator_loss(terms, w)?,
            total_d: adv_d1 + adv_d2,
        })
    }

    /// `(name, value)` pairs in CSV column order.
    pub fn fields(&self) -> [(&'static str, Option<f64>); 11] {
        [
            ("adv_g1", Some(self.adv_g1)),
            ("adv_g2", Some(self.adv_g2)),
            ("adv_d1", Some(self.adv_d1)),
            ("adv_d2", Some(self.adv_d2)),
            ("downsample", self.downsample),
            ("upsample", self.upsample),
            ("clinical_ssim", self.clinical_ssim),
            ("micro_ssim", self.micro_ssim),
            ("cycle", self.cycle),
            ("total_g", Some(self.total_g)),
            ("total_d", Some(self.total_d)),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.fields()
            .iter()
            .all(|(_, v)| v.map_or(true, f64::is_finite))
    }
}

pub fn total_generator_loss(t: &GeneratorTerms, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let terms = [
        ("adv_g1", Some(t.adv_g1), w.w_adv),
        ("adv_g2", Some(t.adv_g2), w.w_adv),
        ("downsample", t.downsample, w.w_down),
        ("upsample", t.upsample, w.w_up),
        ("clinical_ssim", t.clinical_ssim, w.w_ssim_c),
        ("micro_ssim", t.micro_ssim, w.w_ssim_m),
        ("cycle", t.cycle, w.w_cycle),
    ];
    let mut total = 0.0;
    for (name, value, weight) in terms {
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("generator term {name} = {v}")));
            }
            total += weight * v;
        }
    }
    Ok(total)
}

fn check_scale(lr: &Grid2D, hr: &Grid2D) -> Result<()> {
    let s = ScaleFactor::SR.get();
    if hr.height() != lr.height() * s || hr.width() != lr.width() * s {
        return Err(Error::DimensionMismatch(format!(
            "expected a {}x{} high-resolution grid for a {}x{} low-resolution grid, got {}x{}",
            lr.height() * s,
            lr.width() * s,
            lr.height(),
            lr.width(),
            hr.height(),
            hr.width()
        )));
    }
    Ok(())
}

/// Gradient of `sum(w * f(x))` with respect to `x`, given `w`.
fn pool_adjoint(g: &Grid2D) -> Grid2D {
    let s = ScaleFactor::SR;
    let k = 1.0 / (s.get() * s.get()) as f64;
    let up = nn_upsample_g(g, s);
    let (h, w) = up.dims();
    Grid2D::from_raw(h, w, up.into_values().into_iter().map(|v| v * k).collect())
}

/// Gradient of `sum(w * g(x))` with respect to `x`, given `w`.
fn upsample_adjoint(g: &Grid2D) -> Grid2D {
    let s = ScaleFactor::SR;
    let k = (s.get() * s.get()) as f64;
    let pooled = avg_pool_f(g, s).expect("adjoint input is a scaled grid");
    let (h, w) = pooled.dims();
    Grid2D::from_raw(h, w, pooled.into_values().into_iter().map(|v| v * k).collect())
}

/// d mse(target, y) / d y
fn mse_grad_wrt_second(target: &Grid2D, y: &Grid2D) -> Grid2D {
    let n = target.len() as f64;
    let v = target
        .values()
        .iter()
        .zip(y.values())
        .map(|(t, p)| 2.0 * (p - t) / n)
        .collect();
    Grid2D::from_raw(target.height(), target.width(), v)
}

/// MSE between `A` and the average-pooled super-resolved patch.
pub fn l_downsample(a: &Grid2D, a_sr: &Grid2D) -> Result<f64> {
    check_scale(a, a_sr)?;
    mse(a, &avg_pool_f(a_sr, ScaleFactor::SR)?)
}

pub fn l_downsample_grad(a: &Grid2D, a_sr: &Grid2D) -> Result<(f64, Grid2D)> {
    check_scale(a, a_sr)?;
    let pooled = avg_pool_f(a_sr, ScaleFactor::SR)?;
    let value = mse(a, &pooled)?;
    Ok((value, pool_adjoint(&mse_grad_wrt_second(a, &pooled))))
}

/// MSE between `B` and the nearest-neighbour upsampled low-resolution patch.
pub fn l_upsample(b: &Grid2D, b_lr: &Grid2D) -> Result<f64> {
    check_scale(b_lr, b)?;
    mse(b, &nn_upsample_g(b_lr, ScaleFactor::SR))
}

pub fn l_upsample_grad(b: &Grid2D, b_lr: &Grid2D) -> Result<(f64, Grid2D)> {
    check_scale(b_lr, b)?;
    let up = nn_upsample_g(b_lr, ScaleFactor::SR);
    let value = mse(b, &up)?;
    Ok((value, upsample_adjoint(&mse_grad_wrt_second(b, &up))))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "SSIM clamp eps must lie in (0, 1], got {eps}"
        )));
    }
    Ok(())
}

/// `1 / clamp(s, eps, 1)` and its derivative with respect to `s`.
fn reciprocal_clamped(s: f64, eps: f64) -> (f64, f64) {
    if s < eps {
        (1.0 / eps, 0.0)
    } else if s > 1.0 {
        (1.0, 0.0)
    } else {
        (1.0 / s, -1.0 / (s * s))
    }
}

/// Reciprocal SSIM between `A` and the pooled super-resolved patch.
pub fn l_clinical_ssim(a: &Grid2D, a_sr: &Grid2D, p: &SsimParams, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    check_scale(a, a_sr)?;
    let s = ssim(a, &avg_pool_f(a_sr, ScaleFactor::SR)?, p)?;
    Ok(reciprocal_clamped(s, eps).0)
}

pub fn l_clinical_ssim_grad(
    a: &Grid2D,
    a_sr: &Grid2D,
    p: &SsimParams,
    eps: f64,
) -> Result<(f64, Grid2D)> {
    check_eps(eps)?;
    check_scale(a, a_sr)?;
    let pooled = avg_pool_f(a_sr, ScaleFactor::SR)?;
    let (s, gy) = ssim_grad_y(a, &pooled, p)?;
    let (value, d) = reciprocal_clamped(s, eps);
    let g = Grid2D::from_raw(gy.height(), gy.width(), gy.values().iter().map(|v| v * d).collect());
    Ok((value, pool_adjoint(&g)))
}

/// Reciprocal SSIM between `B` and the upsampled low-resolution patch.
pub fn l_micro_ssim(b: &Grid2D, b_lr: &Grid2D, p: &SsimParams, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    check_scale(b_lr, b)?;
    let s = ssim(b, &nn_upsample_g(b_lr, ScaleFactor::SR), p)?;
    Ok(reciprocal_clamped(s, eps).0)
}

pub fn l_micro_ssim_grad(
    b: &Grid2D,
    b_lr: &Grid2D,
    p: &SsimParams,
    eps: f64,
) -> Result<(f64, Grid2D)> {
    check_eps(eps)?;
    check_scale(b_lr, b)?;
    let up = nn_upsample_g(b_lr, ScaleFactor::SR);
    let (s, gy) = ssim_grad_y(b, &up, p)?;
    let (value, d) = reciprocal_clamped(s, eps);
    let g = Grid2D::from_raw(gy.height(), gy.width(), gy.values().iter().map(|v| v * d).collect());
    Ok((value, upsample_adjoint(&g)))
}

/// `mean((x - target)^2)` and its gradient.
pub fn least_squares_grad(x: &Grid2D, target: f64) -> (f64, Grid2D) {
    let n = x.len() as f64;
    let value = x.values().iter().map(|v| (v - target).powi(2)).sum::<f64>() / n;
    let g = x.values().iter().map(|v| 2.0 * (v - target) / n).collect();
    (value, Grid2D::from_raw(x.height(), x.width(), g))
}

/// Least-squares generator objective: `mean((d_out - 1)^2)`.
pub fn adv_generator_loss(d_out: &Grid2D) -> f64 {
    least_squares_grad(d_out, 1.0).0
}

pub fn adv_generator_loss_grad(d_out: &Grid2D) -> (f64, Grid2D) {
    least_squares_grad(d_out, 1.0)
}

/// Least-squares discriminator objective:
/// `0.5 mean((d_real - 1)^2) + 0.5 mean(d_fake^2)`.
pub fn adv_discriminator_loss(d_real: &Grid2D, d_fake: &Grid2D) -> f64 {
    adv_discriminator_loss_grad(d_real, d_fake).0
}

/// Returns the loss and the gradients with respect to `d_real` and `d_fake`.
pub fn adv_discriminator_loss_grad(d_real: &Grid2D, d_fake: &Grid2D) -> (f64, Grid2D, Grid2D) {
    let (lr, gr) = least_squares_grad(d_real, 1.0);
    let (lf, gf) = least_squares_grad(d_fake, 0.0);
    let half = |g: Grid2D| {
        let (h, w) = g.dims();
        Grid2D::from_raw(h, w, g.into_values().into_iter().map(|v| 0.5 * v).collect())
    };
    (0.5 * lr + 0.5 * lf, half(gr), half(gf))
}

/// Classic cycle term `mean(|x - reconstruction|)`, gradient w.r.t. the
/// reconstruction.
pub fn cycle_l1_grad(x: &Grid2D, recon: &Grid2D) -> Result<(f64, Grid2D)> {
    ensure_same_dims(x, recon)?;
    let n = x.len() as f64;
    let mut value = 0.0;
    let g = x
        .values()
        .iter()
        .zip(recon.values())
        .map(|(a, r)| {
            let d = r - a;
            value += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value / n, Grid2D::from_raw(x.height(), x.width(), g)))
}
