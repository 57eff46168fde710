//! Dense 2D intensity grids and the resampling operators used throughout the
//! pipeline: block average pooling (`f`), nearest-neighbour replication (`g`)
//! and a Catmull-Rom bicubic baseline.

use std::fmt;
use std::num::NonZeroUsize;

use crate::error::{Error, Result};

/// Integer resampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleFactor(NonZeroUsize);

impl ScaleFactor {
    /// The 8x factor between clinical and micro-CT patches.
    pub const SR: ScaleFactor = ScaleFactor(match NonZeroUsize::new(8) {
        Some(s) => s,
        None => unreachable!(),
    });

    pub fn new(s: usize) -> Result<Self> {
        NonZeroUsize::new(s)
            .map(ScaleFactor)
            .ok_or_else(|| Error::InvalidParameter("scale factor must be >= 1".into()))
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0.get()
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major 2D grid of finite intensities.
#[derive(Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl fmt::Debug for Grid2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid2D")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl Grid2D {
    /// Builds a grid, checking the length and that every value is finite.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "grid value at index {pos} is {}",
                values[pos]
            )));
        }
        Ok(Grid2D {
            height,
            width,
            values,
        })
    }

    /// Crate-internal constructor for values known to satisfy the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Grid2D {
            height,
            width,
            values,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Grid2D::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Grid2D::filled(height, width, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Grid2D::new(height, width, values)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` elementwise; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Grid2D> {
        Grid2D::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `alpha * self + beta * other`.
    pub fn axpby(&self, alpha: f64, other: &Grid2D, beta: f64) -> Result<Grid2D> {
        ensure_same_dims(self, other)?;
        Grid2D::new(
            self.height,
            self.width,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| alpha * a + beta * b)
                .collect(),
        )
    }

    /// Copies out the `h`x`w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Grid2D> {
        if h == 0 || w == 0 || row + h > self.height || col + w > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(h * w);
        for i in row..row + h {
            let start = i * self.width + col;
            values.extend_from_slice(&self.values[start..start + w]);
        }
        Ok(Grid2D::from_raw(h, w, values))
    }
}

pub(crate) fn ensure_same_dims(x: &Grid2D, y: &Grid2D) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            x.height, x.width, y.height, y.width
        )));
    }
    Ok(())
}

/// Block average pooling: each output cell is the mean of an `s`x`s` block.
pub fn avg_pool_f(x: &Grid2D, s: ScaleFactor) -> Result<Grid2D> {
    let s = s.get();
    if x.height % s != 0 {
        return Err(Error::NotDivisible {
            dim: "height",
            len: x.height,
            scale: s,
        });
    }
    if x.width % s != 0 {
        return Err(Error::NotDivisible {
            dim: "width",
            len: x.width,
            scale: s,
        });
    }
    let (oh, ow) = (x.height / s, x.width / s);
    // Accumulate deviations from each block's first sample so that constant
    // blocks (in particular anything produced by `nn_upsample_g`) average to
    // that sample exactly.
    let mut anchor = vec![0.0; oh * ow];
    for (bi, arow) in anchor.chunks_exact_mut(ow).enumerate() {
        let src = &x.values[bi * s * x.width..(bi * s + 1) * x.width];
        for (a, block) in arow.iter_mut().zip(src.chunks_exact(s)) {
            *a = block[0];
        }
    }
    let mut dev = vec![0.0; oh * ow];
    for i in 0..x.height {
        let bi = i / s;
        let drow = &mut dev[bi * ow..(bi + 1) * ow];
        let arow = &anchor[bi * ow..(bi + 1) * ow];
        let src = &x.values[i * x.width..(i + 1) * x.width];
        for ((d, &a), block) in drow.iter_mut().zip(arow).zip(src.chunks_exact(s)) {
            *d += block.iter().map(|v| v - a).sum::<f64>();
        }
    }
    let inv = 1.0 / (s * s) as f64;
    let out = anchor
        .iter()
        .zip(&dev)
        .map(|(a, d)| a + d * inv)
        .collect();
    Ok(Grid2D::from_raw(oh, ow, out))
}

/// Nearest-neighbour upsampling: `out[i][j] = x[i / s][j / s]`.
pub fn nn_upsample_g(x: &Grid2D, s: ScaleFactor) -> Grid2D {
    let s = s.get();
    let (oh, ow) = (x.height * s, x.width * s);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let src = &x.values[(i / s) * x.width..(i / s + 1) * x.width];
        for &v in src {
            out.extend(std::iter::repeat(v).take(s));
        }
    }
    Grid2D::from_raw(oh, ow, out)
}

/// Mean squared error between equally sized grids.
pub fn mse(x: &Grid2D, y: &Grid2D) -> Result<f64> {
    ensure_same_dims(x, y)?;
    let sum: f64 = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.len() as f64)
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate, half-pixel aligned.
fn cubic_taps(out_idx: usize, s: usize, src_len: usize) -> [(usize, f64); 4] {
    let u = (out_idx as f64 + 0.5) / s as f64 - 0.5;
    let base = u.floor();
    let frac = u - base;
    let base = base as isize;
    let last = src_len as isize - 1;
    let mut taps = [(0usize, 0.0); 4];
    for (k, tap) in taps.iter_mut().enumerate() {
        let offset = k as isize - 1;
        let idx = (base + offset).clamp(0, last) as usize;
        *tap = (idx, cubic_kernel(frac - offset as f64));
    }
    taps
}

/// Bicubic upsampling with a Catmull-Rom kernel and clamped borders.
pub fn bicubic_upsample(x: &Grid2D, s: ScaleFactor) -> Grid2D {
    let s = s.get();
    let (h, w) = x.dims();
    let (oh, ow) = (h * s, w * s);
    let col_taps: Vec<_> = (0..ow).map(|j| cubic_taps(j, s, w)).collect();

    // horizontal pass: h x ow
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        let src = &x.values[i * w..(i + 1) * w];
        for (j, taps) in col_taps.iter().enumerate() {
            tmp[i * ow + j] = taps.iter().map(|&(k, wt)| wt * src[k]).sum();
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let taps = cubic_taps(i, s, h);
        let dst = &mut out[i * ow..(i + 1) * ow];
        for &(k, wt) in &taps {
            let src = &tmp[k * ow..(k + 1) * ow];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += wt * v;
            }
        }
    }
    Grid2D::from_raw(oh, ow, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid2D {
        Grid2D::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid2D::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Grid2D::new(0, 2, vec![]).is_err());
        assert!(matches!(
            Grid2D::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(ScaleFactor::new(0).is_err());
    }

    #[test]
    fn pool_of_constant_block() {
        let x = Grid2D::filled(8, 8, 1.0).unwrap();
        let y = avg_pool_f(&x, ScaleFactor::SR).unwrap();
        assert_eq!(y.dims(), (1, 1));
        assert_eq!(y.values(), &[1.0]);
    }

    #[test]
    fn pool_of_quadrant() {
        let x = Grid2D::from_fn(16, 16, |i, j| if i < 8 && j < 8 { 2.0 } else { 0.0 }).unwrap();
        let y = avg_pool_f(&x, ScaleFactor::SR).unwrap();
        assert_eq!(y.values(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_grid(&mut rng, 256, 256);
        let y = avg_pool_f(&x, ScaleFactor::SR).unwrap();
        assert_eq!(y.dims(), (32, 32));
        for bi in 0..32 {
            for bj in 0..32 {
                let mut acc = 0.0;
                for di in 0..8 {
                    for dj in 0..8 {
                        acc += x.get(bi * 8 + di, bj * 8 + dj);
                    }
                }
                assert!((y.get(bi, bj) - acc / 64.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_rejects_indivisible() {
        let x = Grid2D::zeros(12, 16).unwrap();
        let err = avg_pool_f(&x, ScaleFactor::SR).unwrap_err();
        assert!(matches!(err, Error::NotDivisible { dim: "height", .. }));
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn upsample_replicates() {
        let x = Grid2D::new(1, 1, vec![0.3]).unwrap();
        let y = nn_upsample_g(&x, ScaleFactor::SR);
        assert_eq!(y.dims(), (8, 8));
        assert!(y.values().iter().all(|&v| v == 0.3));

        let x = Grid2D::new(1, 2, vec![-1.0, 2.0]).unwrap();
        let y = nn_upsample_g(&x, ScaleFactor::SR);
        assert_eq!(y.dims(), (8, 16));
        for i in 0..8 {
            for j in 0..16 {
                assert_eq!(y.get(i, j), if j < 8 { -1.0 } else { 2.0 });
            }
        }
    }

    #[test]
    fn mse_cases() {
        let z = Grid2D::zeros(4, 5).unwrap();
        let c = Grid2D::filled(4, 5, 0.7).unwrap();
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert!((mse(&z, &c).unwrap() - 0.49).abs() < 1e-15);
        assert!(mse(&z, &Grid2D::zeros(5, 4).unwrap()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_grid(&mut rng, 17, 23);
        let b = random_grid(&mut rng, 17, 23);
        let mut acc = 0.0;
        for i in 0..17 {
            for j in 0..23 {
                let d = a.get(i, j) - b.get(i, j);
                acc += d * d;
            }
        }
        assert!((mse(&a, &b).unwrap() - acc / (17.0 * 23.0)).abs() < 1e-12);
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for k in 0..100 {
            let f = k as f64 / 100.0;
            let s: f64 = (-1..=2).map(|o| cubic_kernel(f - o as f64)).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.5), 0.0);
    }

    #[test]
    fn bicubic_constant_and_linear() {
        let c = Grid2D::filled(5, 3, -0.25).unwrap();
        let up = bicubic_upsample(&c, ScaleFactor::SR);
        assert_eq!(up.dims(), (40, 24));
        assert!(up.values().iter().all(|v| (v + 0.25).abs() < 1e-14));

        let ramp = Grid2D::from_fn(4, 4, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.1).unwrap();
        let s = 8;
        let up = bicubic_upsample(&ramp, ScaleFactor::new(s).unwrap());
        // taps stay in range when 1 <= u <= h - 3
        for oi in 0..32 {
            for oj in 0..32 {
                let u = (oi as f64 + 0.5) / s as f64 - 0.5;
                let v = (oj as f64 + 0.5) / s as f64 - 0.5;
                if u >= 1.0 && u <= 1.999 && v >= 1.0 && v <= 1.999 {
                    let expect = 0.3 * u - 0.2 * v + 0.1;
                    assert!((up.get(oi, oj) - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bicubic_matches_direct_kernel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_grid(&mut rng, 32, 32);
        let s = 8usize;
        let up = bicubic_upsample(&x, ScaleFactor::SR);
        let clamp = |k: isize| k.clamp(0, 31) as usize;
        for oi in (0..256).step_by(3) {
            for oj in (0..256).step_by(5) {
                let u = (oi as f64 + 0.5) / s as f64 - 0.5;
                let v = (oj as f64 + 0.5) / s as f64 - 0.5;
                let (bu, bv) = (u.floor() as isize, v.floor() as isize);
                let mut acc = 0.0;
                for a in bu - 1..=bu + 2 {
                    for b in bv - 1..=bv + 2 {
                        acc += cubic_kernel(u - a as f64)
                            * cubic_kernel(v - b as f64)
                            * x.get(clamp(a), clamp(b));
                    }
                }
                assert!((up.get(oi, oj) - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crop_window() {
        let x = Grid2D::from_fn(4, 4, |i, j| (i * 4 + j) as f64).unwrap();
        let c = x.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.values(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(x.crop(3, 3, 2, 2).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn grid_strategy() -> impl Strategy<Value = (Grid2D, usize)> {
            (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, s)| {
                proptest::collection::vec(-10.0f64..10.0, h * w)
                    .prop_map(move |v| (Grid2D::new(h, w, v).unwrap(), s))
            })
        }

        proptest! {
            #[test]
            fn pool_after_upsample_is_identity((x, s) in grid_strategy()) {
                let s = ScaleFactor::new(s).unwrap();
                let back = avg_pool_f(&nn_upsample_g(&x, s), s).unwrap();
                prop_assert_eq!(back.values(), x.values());
            }

            #[test]
            fn upsample_pool_is_projection((x, s) in grid_strategy()) {
                let s = ScaleFactor::new(s).unwrap();
                let y = nn_upsample_g(&x, s);
                let fy = avg_pool_f(&y, s).unwrap();
                let again = avg_pool_f(&nn_upsample_g(&fy, s), s).unwrap();
                prop_assert_eq!(again.values(), fy.values());
            }

            #[test]
            fn pool_preserves_mean((x, s) in grid_strategy(), seed in any::<u64>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let s = ScaleFactor::new(s).unwrap();
                let y = Grid2D::from_fn(x.height() * s.get(), x.width() * s.get(), |_, _| {
                    rng.gen_range(-5.0..5.0)
                })
                .unwrap();
                let fy = avg_pool_f(&y, s).unwrap();
                prop_assert!((fy.mean() - y.mean()).abs() < 1e-12);
            }

            #[test]
            fn resampling_is_linear(
                (x, s) in grid_strategy(),
                alpha in -3.0f64..3.0,
                beta in -3.0f64..3.0,
                seed in any::<u64>(),
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let s = ScaleFactor::new(s).unwrap();
                let y = Grid2D::from_fn(x.height(), x.width(), |_, _| rng.gen_range(-5.0..5.0)).unwrap();
                let combo = x.axpby(alpha, &y, beta).unwrap();
                let lhs = nn_upsample_g(&combo, s);
                let rhs = nn_upsample_g(&x, s).axpby(alpha, &nn_upsample_g(&y, s), beta).unwrap();
                for (a, b) in lhs.values().iter().zip(rhs.values()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                let (bh, bw) = (x.height() * s.get(), x.width() * s.get());
                let bx = Grid2D::from_fn(bh, bw, |_, _| rng.gen_range(-5.0..5.0)).unwrap();
                let by = Grid2D::from_fn(bh, bw, |_, _| rng.gen_range(-5.0..5.0)).unwrap();
                let lhs = avg_pool_f(&bx.axpby(alpha, &by, beta).unwrap(), s).unwrap();
                let rhs = avg_pool_f(&bx, s).unwrap()
                    .axpby(alpha, &avg_pool_f(&by, s).unwrap(), beta).unwrap();
                for (a, b) in lhs.values().iter().zip(rhs.values()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn mse_symmetric_nonnegative((x, _s) in grid_strategy(), shift in -2.0f64..2.0) {
                let y = x.map(|v| v * 0.5 + shift).unwrap();
                let a = mse(&x, &y).unwrap();
                let b = mse(&y, &x).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert_eq!(a, b);
            }
        }
    }
}
