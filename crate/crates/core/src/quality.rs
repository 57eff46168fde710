//! Structural similarity (Gaussian-weighted, valid windows) and PSNR.
//!
//! SSIM is evaluated on every window position that lies fully inside the
//! image; no padding is fabricated at the borders. The gradient of the mean
//! SSIM with respect to both inputs is available in closed form, which the
//! SSIM-based cycle losses need for training.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_dims, mse, Grid2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams::normalized()
    }
}

impl SsimParams {
    /// Defaults for data normalized to `[-1, 1]` (dynamic range 2).
    pub const fn normalized() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 2.0,
        }
    }

    /// Defaults for 8-bit data.
    pub const fn eight_bit() -> Self {
        SsimParams {
            dynamic_range: 255.0,
            ..SsimParams::normalized()
        }
    }

    pub fn with_dynamic_range(self, dynamic_range: f64) -> Self {
        SsimParams {
            dynamic_range,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("k1", self.k1),
            ("k2", self.k2),
            ("dynamic_range", self.dynamic_range),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "SSIM {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// Separable "valid" correlation with a 1D kernel along both axes.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        let row = &src[i * w..(i + 1) * w];
        let dst = &mut tmp[i * ow..(i + 1) * ow];
        for (t, &kt) in k.iter().enumerate() {
            for (d, v) in dst.iter_mut().zip(&row[t..t + ow]) {
                *d += kt * v;
            }
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let dst = &mut out[i * ow..(i + 1) * ow];
        for (t, &kt) in k.iter().enumerate() {
            let row = &tmp[(i + t) * ow..(i + t + 1) * ow];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += kt * v;
            }
        }
    }
    (out, oh, ow)
}

/// Adjoint of [`filter_valid`]: scatters an `oh`x`ow` map back to `h`x`w`.
fn filter_valid_adjoint(g: &[f64], oh: usize, ow: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (h, w) = (oh + n - 1, ow + n - 1);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..oh {
        let row = &g[i * ow..(i + 1) * ow];
        for (t, &kt) in k.iter().enumerate() {
            let dst = &mut tmp[(i + t) * ow..(i + t + 1) * ow];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += kt * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let row = &tmp[i * ow..(i + 1) * ow];
        let dst = &mut out[i * w..(i + 1) * w];
        for (t, &kt) in k.iter().enumerate() {
            for (d, v) in dst[t..t + ow].iter_mut().zip(row) {
                *d += kt * v;
            }
        }
    }
    out
}

fn check_inputs(x: &Grid2D, y: &Grid2D, p: &SsimParams) -> Result<()> {
    p.validate()?;
    ensure_same_dims(x, y)?;
    if x.height() < p.window || x.width() < p.window {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} grid is smaller than the {}-pixel SSIM window",
            x.height(),
            x.width(),
            p.window
        )));
    }
    Ok(())
}

struct LocalStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
    oh: usize,
    ow: usize,
}

fn local_stats(x: &Grid2D, y: &Grid2D, k: &[f64]) -> LocalStats {
    let (h, w) = x.dims();
    let (xv, yv) = (x.values(), y.values());
    let xx: Vec<f64> = xv.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = yv.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xv.iter().zip(yv).map(|(a, b)| a * b).collect();
    let (mu_x, oh, ow) = filter_valid(xv, h, w, k);
    let (mu_y, ..) = filter_valid(yv, h, w, k);
    let (mut var_x, ..) = filter_valid(&xx, h, w, k);
    let (mut var_y, ..) = filter_valid(&yy, h, w, k);
    let (mut cov, ..) = filter_valid(&xy, h, w, k);
    for i in 0..mu_x.len() {
        var_x[i] -= mu_x[i] * mu_x[i];
        var_y[i] -= mu_y[i] * mu_y[i];
        cov[i] -= mu_x[i] * mu_y[i];
    }
    LocalStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
        oh,
        ow,
    }
}

/// Mean SSIM over all valid window positions.
pub fn ssim(x: &Grid2D, y: &Grid2D, p: &SsimParams) -> Result<f64> {
    check_inputs(x, y, p)?;
    let st = local_stats(x, y, &p.kernel());
    let (c1, c2) = (p.c1(), p.c2());
    let n = st.mu_x.len();
    let sum: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            (2.0 * mx * my + c1) * (2.0 * st.cov[i] + c2)
                / ((mx * mx + my * my + c1) * (st.var_x[i] + st.var_y[i] + c2))
        })
        .sum();
    Ok(sum / n as f64)
}

/// Per-window gradients of mean SSIM with respect to the filtered raw
/// moments m_x, m_y, m_xy and the shared m_xx / m_yy term.
struct MomentGrads {
    value: f64,
    g_mx: Vec<f64>,
    g_my: Vec<f64>,
    g_sq: Vec<f64>,
    g_mxy: Vec<f64>,
    oh: usize,
    ow: usize,
}

fn moment_grads(x: &Grid2D, y: &Grid2D, p: &SsimParams, k: &[f64]) -> MomentGrads {
    let st = local_stats(x, y, k);
    let (c1, c2) = (p.c1(), p.c2());
    let n = st.mu_x.len();
    let inv_n = 1.0 / n as f64;
    let mut g = MomentGrads {
        value: 0.0,
        g_mx: vec![0.0; n],
        g_my: vec![0.0; n],
        g_sq: vec![0.0; n],
        g_mxy: vec![0.0; n],
        oh: st.oh,
        ow: st.ow,
    };
    let mut sum = 0.0;
    for i in 0..n {
        let (mx, my) = (st.mu_x[i], st.mu_y[i]);
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * st.cov[i] + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = st.var_x[i] + st.var_y[i] + c2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;

        let d_cov = 2.0 * a1 / (b1 * b2) * inv_n;
        let d_var = -s / b2 * inv_n;
        let d_mux = (2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1) * inv_n;
        let d_muy = (2.0 * mx * a2 / (b1 * b2) - s * 2.0 * my / b1) * inv_n;

        // var = m_xx - mu^2, cov = m_xy - mu_x mu_y
        g.g_mx[i] = d_mux - 2.0 * mx * d_var - my * d_cov;
        g.g_my[i] = d_muy - 2.0 * my * d_var - mx * d_cov;
        g.g_sq[i] = d_var;
        g.g_mxy[i] = d_cov;
    }
    g.value = sum * inv_n;
    g
}

/// Mean SSIM together with its gradients with respect to `x` and `y`.
pub fn ssim_with_grad(x: &Grid2D, y: &Grid2D, p: &SsimParams) -> Result<(f64, Grid2D, Grid2D)> {
    check_inputs(x, y, p)?;
    let k = p.kernel();
    let m = moment_grads(x, y, p, &k);
    let (oh, ow) = (m.oh, m.ow);
    let a_mx = filter_valid_adjoint(&m.g_mx, oh, ow, &k);
    let a_my = filter_valid_adjoint(&m.g_my, oh, ow, &k);
    let a_sq = filter_valid_adjoint(&m.g_sq, oh, ow, &k);
    let a_mxy = filter_valid_adjoint(&m.g_mxy, oh, ow, &k);

    let (xv, yv) = (x.values(), y.values());
    let gx: Vec<f64> = (0..xv.len())
        .map(|q| a_mx[q] + 2.0 * xv[q] * a_sq[q] + yv[q] * a_mxy[q])
        .collect();
    let gy: Vec<f64> = (0..yv.len())
        .map(|q| a_my[q] + 2.0 * yv[q] * a_sq[q] + xv[q] * a_mxy[q])
        .collect();
    let (h, w) = x.dims();
    Ok((m.value, Grid2D::from_raw(h, w, gx), Grid2D::from_raw(h, w, gy)))
}

/// Mean SSIM and its gradient with respect to `y` only.
pub fn ssim_grad_y(x: &Grid2D, y: &Grid2D, p: &SsimParams) -> Result<(f64, Grid2D)> {
    check_inputs(x, y, p)?;
    let k = p.kernel();
    let m = moment_grads(x, y, p, &k);
    let (oh, ow) = (m.oh, m.ow);
    let a_my = filter_valid_adjoint(&m.g_my, oh, ow, &k);
    let a_sq = filter_valid_adjoint(&m.g_sq, oh, ow, &k);
    let a_mxy = filter_valid_adjoint(&m.g_mxy, oh, ow, &k);
    let (xv, yv) = (x.values(), y.values());
    let gy: Vec<f64> = (0..yv.len())
        .map(|q| a_my[q] + 2.0 * yv[q] * a_sq[q] + xv[q] * a_mxy[q])
        .collect();
    let (h, w) = x.dims();
    Ok((m.value, Grid2D::from_raw(h, w, gy)))
}

/// Peak signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    /// The inputs are identical; PSNR is unbounded.
    Identical,
    Db(f64),
}

impl Psnr {
    /// Decibel value, with `+inf` for identical inputs.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Identical => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.4}"),
        }
    }
}

pub fn psnr(x: &Grid2D, y: &Grid2D, dynamic_range: f64) -> Result<Psnr> {
    if !(dynamic_range.is_finite() && dynamic_range > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "PSNR dynamic range must be positive, got {dynamic_range}"
        )));
    }
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (dynamic_range * dynamic_range / e).log10()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid2D {
        Grid2D::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn identical_inputs_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_grid(&mut rng, 20, 24);
        for p in [SsimParams::normalized(), SsimParams::eight_bit()] {
            assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_pairs_match_closed_form() {
        let x = Grid2D::filled(16, 16, 100.0).unwrap();
        let y = Grid2D::filled(16, 16, 110.0).unwrap();
        let p = SsimParams::eight_bit();
        let c1 = p.c1();
        let expect = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
        let got = ssim(&x, &y, &p).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert!((got - 0.995477).abs() < 1e-5);

        let x = Grid2D::filled(12, 12, 0.5).unwrap();
        let y = Grid2D::filled(12, 12, -0.5).unwrap();
        let got = ssim(&x, &y, &SsimParams::normalized()).unwrap();
        let expect = (2.0 * 0.5 * -0.5 + 4e-4) / (0.25 + 0.25 + 4e-4);
        assert!((got - expect).abs() < 1e-9);
        assert!((got + 0.998401).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_shapes_and_params() {
        let a = Grid2D::zeros(10, 12).unwrap();
        let b = Grid2D::zeros(12, 12).unwrap();
        assert!(matches!(
            ssim(&a, &a, &SsimParams::normalized()),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(ssim(&a, &b, &SsimParams::normalized()).is_err());
        let bad = SsimParams {
            window: 4,
            ..SsimParams::normalized()
        };
        assert!(ssim(&b, &b, &bad).is_err());
    }

    #[test]
    fn symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random_grid(&mut rng, 24, 20);
            let y = random_grid(&mut rng, 24, 20);
            let p = SsimParams::normalized();
            let a = ssim(&x, &y, &p).unwrap();
            let b = ssim(&y, &x, &p).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a.abs() <= 1.0);
            let neg = x.map(|v| -v).unwrap();
            assert!(ssim(&x, &neg, &p).unwrap() >= -1.0);
        }
    }

    #[test]
    fn shift_invariance_on_translated_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let big_x = random_grid(&mut rng, 40, 40);
        let big_y = random_grid(&mut rng, 40, 40);
        let p = SsimParams::normalized();
        let base = ssim(
            &big_x.crop(0, 0, 30, 30).unwrap(),
            &big_y.crop(0, 0, 30, 30).unwrap(),
            &p,
        )
        .unwrap();
        // translate both by (dy, dx) into fresh canvases, then crop back
        let (dy, dx) = (5, 7);
        let shift = |g: &Grid2D| {
            Grid2D::from_fn(45, 47, |i, j| {
                if i >= dy && j >= dx {
                    g.get(i - dy, j - dx)
                } else {
                    0.9
                }
            })
            .unwrap()
        };
        let sx = shift(&big_x).crop(dy, dx, 30, 30).unwrap();
        let sy = shift(&big_y).crop(dy, dx, 30, 30).unwrap();
        assert!((ssim(&sx, &sy, &p).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn decreasing_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Grid2D::from_fn(48, 48, |i, j| ((i as f64) * 0.2).sin() * ((j as f64) * 0.15).cos() * 0.6)
            .unwrap();
        let noise: Vec<f64> = (0..48 * 48).map(|_| rng.sample(StandardNormal)).collect();
        let p = SsimParams::normalized();
        let scores: Vec<f64> = [0.05, 0.1, 0.2]
            .iter()
            .map(|&a| {
                let y = Grid2D::new(
                    48,
                    48,
                    x.values().iter().zip(&noise).map(|(v, n)| v + a * n).collect(),
                )
                .unwrap();
                ssim(&x, &y, &p).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_grid(&mut rng, 14, 13);
        let y = x
            .map(|v| 0.6 * v + 0.1)
            .unwrap()
            .axpby(1.0, &random_grid(&mut rng, 14, 13), 0.3)
            .unwrap();
        let p = SsimParams {
            window: 7,
            ..SsimParams::normalized()
        };
        let (s, gx, gy) = ssim_with_grad(&x, &y, &p).unwrap();
        assert!((s - ssim(&x, &y, &p).unwrap()).abs() < 1e-14);
        let (s_y, gy_only) = ssim_grad_y(&x, &y, &p).unwrap();
        assert_eq!(s_y, s);
        assert_eq!(gy_only, gy);
        let h = 1e-6;
        for (target, grad) in [(0, &gx), (1, &gy)] {
            for q in (0..x.len()).step_by(7) {
                let bump = |d: f64| {
                    let mut xs = x.values().to_vec();
                    let mut ys = y.values().to_vec();
                    if target == 0 {
                        xs[q] += d;
                    } else {
                        ys[q] += d;
                    }
                    let xg = Grid2D::new(14, 13, xs).unwrap();
                    let yg = Grid2D::new(14, 13, ys).unwrap();
                    ssim(&xg, &yg, &p).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (fd - grad.values()[q]).abs() < 1e-7,
                    "q={q} fd={fd} an={}",
                    grad.values()[q]
                );
            }
        }
    }

    #[test]
    fn psnr_cases() {
        let z = Grid2D::zeros(8, 8).unwrap();
        let t = Grid2D::filled(8, 8, 0.1).unwrap();
        match psnr(&z, &t, 2.0).unwrap() {
            Psnr::Db(v) => assert!((v - 26.0206).abs() < 1e-4),
            Psnr::Identical => panic!(),
        }
        assert_eq!(psnr(&z, &z, 2.0).unwrap(), Psnr::Identical);
        assert_eq!(Psnr::Identical.to_string(), "identical");
        let two = Grid2D::filled(8, 8, 2.0).unwrap();
        assert!(psnr(&z, &two, 2.0).unwrap().db().abs() < 1e-12);
        assert!(psnr(&z, &Grid2D::zeros(4, 4).unwrap(), 2.0).is_err());
    }
}
