//! Synthetic paired high/low-resolution volumes with known ground truth.
//!
//! The high-resolution volume holds randomly branching tubes (solid vessels
//! and hollow airways) over a textured background. The low-resolution volume
//! is derived slice by slice: periodic Gaussian blur, 8x average pooling,
//! additive noise. Training data drawn by [`split_unpaired`] comes from
//! disjoint slabs so that no low-resolution training patch has a
//! high-resolution counterpart in the training set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{extract_patch, PatchOrigin, PatchSampler, RealVolume, Region};
use crate::error::{Error, Result};
use crate::grid::{avg_pool_f, Grid2D, ScaleFactor};
use crate::model::{HR_PATCH, LR_PATCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// `(slices, rows, cols)` of the high-resolution volume.
    pub dims_hr: [usize; 3],
    pub n_tubes: usize,
    pub noise_sigma_hr: f64,
    pub noise_sigma_lr: f64,
    /// Gaussian blur applied before pooling, in high-resolution pixels.
    pub blur_sigma_lr: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims_hr: [64, 512, 512],
            n_tubes: 24,
            noise_sigma_hr: 0.02,
            noise_sigma_lr: 0.01,
            blur_sigma_lr: 2.0,
            seed: 0,
        }
    }
}

/// Isotropic high-resolution voxel size, mm.
pub const HR_SPACING_MM: f64 = 0.04;

const BACKGROUND: f64 = -0.6;
const TEXTURE_AMPLITUDE: f64 = 0.08;
const FINE_TEXTURE_AMPLITUDE: f64 = 0.04;
const WALL_LEVEL: f64 = 0.5;
const LUMEN_LEVEL: f64 = -0.9;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let s = ScaleFactor::SR.get();
        let [z, r, c] = self.dims_hr;
        if z == 0 || r == 0 || c == 0 || r % s != 0 || c % s != 0 {
            return Err(Error::InvalidParameter(format!(
                "phantom dims {:?} must be positive with in-plane sizes divisible by {s}",
                self.dims_hr
            )));
        }
        for (name, v) in [
            ("noise_sigma_hr", self.noise_sigma_hr),
            ("noise_sigma_lr", self.noise_sigma_lr),
            ("blur_sigma_lr", self.blur_sigma_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub hr: RealVolume,
    pub lr: RealVolume,
}

struct Wave {
    freq: [f64; 3],
    phase: f64,
    amp: f64,
}

fn random_waves(rng: &mut ChaCha8Rng, n: usize, period: (f64, f64), amp: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| {
            let dir = random_unit(rng);
            let p = rng.gen_range(period.0..period.1);
            Wave {
                freq: dir.map(|d| d / p),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: amp / n as f64,
            }
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    hollow: bool,
}

fn grow_tree(rng: &mut ChaCha8Rng, dims: [usize; 3], hollow: bool, out: &mut Vec<Segment>) {
    let start = [
        rng.gen_range(0.0..dims[0] as f64),
        rng.gen_range(0.0..dims[1] as f64),
        rng.gen_range(0.0..dims[2] as f64),
    ];
    let radius = rng.gen_range(4.0..14.0);
    let mut stack = vec![(start, random_unit(rng), radius, 0usize)];
    let turn = Normal::new(0.0, 0.35).expect("valid sigma");
    while let Some((p, dir, r, depth)) = stack.pop() {
        if r < 1.5 || depth > 8 || out.len() > 4000 {
            continue;
        }
        let len = rng.gen_range(3.0..6.0) * r;
        let q = [p[0] + dir[0] * len, p[1] + dir[1] * len, p[2] + dir[2] * len];
        out.push(Segment {
            a: p,
            b: q,
            radius: r,
            hollow,
        });
        let inside = q
            .iter()
            .zip(dims)
            .all(|(&x, d)| x > -r && x < d as f64 + r);
        if !inside {
            continue;
        }
        let bend = |d: [f64; 3], rng: &mut ChaCha8Rng| {
            let v = [
                d[0] + turn.sample(rng),
                d[1] + turn.sample(rng),
                d[2] + turn.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            v.map(|x| x / n)
        };
        if rng.gen_bool(0.3) {
            let d1 = bend(dir, rng);
            let d2 = bend(dir, rng);
            stack.push((q, d1, r * 0.75, depth + 1));
            stack.push((q, d2, r * 0.75, depth + 1));
        } else {
            let d = bend(dir, rng);
            stack.push((q, d, r * 0.95, depth + 1));
        }
    }
}

fn dist_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let l2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if l2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Rasterizes a capsule as anti-aliased coverage, keeping the max per voxel.
fn paint(cov: &mut [f32], dims: [usize; 3], a: [f64; 3], b: [f64; 3], r: f64) {
    let lo = |i: usize| ((a[i].min(b[i]) - r - 1.0).floor().max(0.0)) as usize;
    let hi = |i: usize| ((a[i].max(b[i]) + r + 1.0).ceil().max(0.0) as usize).min(dims[i]);
    for z in lo(0)..hi(0) {
        for y in lo(1)..hi(1) {
            let row = (z * dims[1] + y) * dims[2];
            for x in lo(2)..hi(2) {
                let d = dist_to_segment([z as f64, y as f64, x as f64], a, b);
                let c = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                if c > cov[row + x] {
                    cov[row + x] = c;
                }
            }
        }
    }
}

/// Normalized 1D Gaussian taps, radius `ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with periodic borders, which preserves the mean.
pub fn gaussian_blur_periodic(g: &Grid2D, sigma: f64) -> Grid2D {
    if sigma <= 0.0 {
        return g.clone();
    }
    let k = gaussian_taps(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = g.dims();
    let v = g.values();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        let row = &v[i * w..(i + 1) * w];
        for j in 0..w {
            tmp[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, &kt)| kt * row[wrap(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for (t, &kt) in k.iter().enumerate() {
            let src = wrap(i as isize + t as isize - r, h);
            let srow = &tmp[src * w..(src + 1) * w];
            for (o, s) in out[i * w..(i + 1) * w].iter_mut().zip(srow) {
                *o += kt * s;
            }
        }
    }
    Grid2D::from_raw(h, w, out)
}

/// Blur, 8x average pooling and additive noise for one slice.
pub fn degrade_slice(hr: &Grid2D, blur_sigma: f64, noise_sigma: f64, rng: &mut impl Rng) -> Result<Grid2D> {
    let pooled = avg_pool_f(&gaussian_blur_periodic(hr, blur_sigma), ScaleFactor::SR)?;
    if noise_sigma == 0.0 {
        return Ok(pooled);
    }
    let (h, w) = pooled.dims();
    let vals = pooled
        .into_values()
        .into_iter()
        .map(|v| {
            let n: f64 = rng.sample(StandardNormal);
            (v + noise_sigma * n).clamp(-1.0, 1.0)
        })
        .collect();
    Grid2D::new(h, w, vals)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims_hr;
    let n = dims.iter().product::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let coarse = random_waves(&mut rng, 6, (60.0, 200.0), TEXTURE_AMPLITUDE);
    let fine = random_waves(&mut rng, 4, (5.0, 12.0), FINE_TEXTURE_AMPLITUDE);

    let mut segments = Vec::new();
    for t in 0..spec.n_tubes {
        grow_tree(&mut rng, dims, t % 2 == 1, &mut segments);
    }
    let mut wall = vec![0f32; n];
    let mut lumen = vec![0f32; n];
    for s in &segments {
        paint(&mut wall, dims, s.a, s.b, s.radius);
        if s.hollow {
            paint(&mut lumen, dims, s.a, s.b, s.radius * 0.6);
        }
    }

    let textured = spec.n_tubes > 0 || spec.noise_sigma_hr > 0.0;
    let mut hr = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let mut v = BACKGROUND;
                if textured {
                    for wv in coarse.iter().chain(&fine) {
                        let arg = tau * (wv.freq[0] * p[0] + wv.freq[1] * p[1] + wv.freq[2] * p[2]);
                        v += wv.amp * (arg + wv.phase).sin();
                    }
                }
                let idx = hr.len();
                let wc = f64::from(wall[idx]);
                v += (WALL_LEVEL - v) * wc;
                let lc = f64::from(lumen[idx]);
                v += (LUMEN_LEVEL - v) * lc;
                hr.push(v);
            }
        }
    }
    drop(wall);
    drop(lumen);
    if spec.noise_sigma_hr > 0.0 {
        for v in hr.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = (*v + spec.noise_sigma_hr * e).clamp(-1.0, 1.0);
        }
    } else {
        hr.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    let hr = RealVolume::new(dims, [HR_SPACING_MM; 3], hr)?;

    let s = ScaleFactor::SR.get();
    let mut lr = Vec::with_capacity(n / (s * s));
    for k in 0..dims[0] {
        let slice = hr.slice(k)?;
        lr.extend_from_slice(
            degrade_slice(&slice, spec.blur_sigma_lr, spec.noise_sigma_lr, &mut rng)?.values(),
        );
    }
    let lr = RealVolume::new(
        [dims[0], dims[1] / s, dims[2] / s],
        [HR_SPACING_MM, HR_SPACING_MM * s as f64, HR_SPACING_MM * s as f64],
        lr,
    )?;
    Ok(Phantom { hr, lr })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub n_train_lr: usize,
    pub n_train_hr: usize,
    pub n_test: usize,
    pub foreground_threshold: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            n_train_lr: 160,
            n_train_hr: 160,
            n_test: 32,
            foreground_threshold: 0.25,
        }
    }
}

/// Aligned low/high-resolution pair from the held-out slab.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPair {
    pub lr: Grid2D,
    pub hr: Grid2D,
    pub origin_lr: PatchOrigin,
}

#[derive(Debug, Clone)]
pub struct UnpairedSplit {
    pub train_lr: Vec<Grid2D>,
    pub train_hr: Vec<Grid2D>,
    pub test_pairs: Vec<TestPair>,
    /// Slabs in high-resolution voxel coordinates.
    pub lr_region: Region,
    pub hr_region: Region,
    pub test_region: Region,
    pub train_lr_origins: Vec<PatchOrigin>,
    pub train_hr_origins: Vec<PatchOrigin>,
}

/// Splits the phantom along z into three disjoint slabs: low-resolution
/// training, high-resolution training and held-out test. The seed decides
/// the slab order and every patch location.
pub fn split_unpaired(p: &Phantom, seed: u64, spec: &SplitSpec) -> Result<UnpairedSplit> {
    let s = ScaleFactor::SR.get();
    let [depth, rows, cols] = p.hr.dims;
    if depth < 3 || rows < HR_PATCH || cols < HR_PATCH {
        return Err(Error::InvalidParameter(format!(
            "phantom {:?} is too small to split into three slabs of {HR_PATCH}x{HR_PATCH} slices",
            p.hr.dims
        )));
    }
    if p.lr.dims != [depth, rows / s, cols / s] {
        return Err(Error::DimensionMismatch(format!(
            "low-resolution volume {:?} does not match {:?}",
            p.lr.dims, p.hr.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (depth * 3 / 8).max(1);
    let b = (depth * 3 / 8).max(1);
    let c = depth - a - b;
    if c == 0 {
        return Err(Error::InvalidParameter(format!(
            "{depth} slices leave no held-out slab"
        )));
    }
    // role 0 = lr train, 1 = hr train, 2 = test
    let mut roles = [(0usize, a), (1, b), (2, c)];
    roles.shuffle(&mut rng);
    let mut ranges = [0..0, 0..0, 0..0];
    let mut z0 = 0;
    for (role, len) in roles {
        ranges[role] = z0..z0 + len;
        z0 += len;
    }
    let plane = |z: std::ops::Range<usize>| Region {
        z,
        rows: 0..rows,
        cols: 0..cols,
    };
    let lr_region = plane(ranges[0].clone());
    let hr_region = plane(ranges[1].clone());
    let test_region = plane(ranges[2].clone());

    let lr_plane = Region {
        z: lr_region.z.clone(),
        rows: 0..rows / s,
        cols: 0..cols / s,
    };
    let mut lr_sampler = PatchSampler::new(LR_PATCH, spec.foreground_threshold, rng.gen())?;
    let (train_lr, train_lr_origins) = lr_sampler
        .sample_in(&p.lr, &lr_plane, spec.n_train_lr)?
        .into_iter()
        .unzip();
    let mut hr_sampler = PatchSampler::new(HR_PATCH, spec.foreground_threshold, rng.gen())?;
    let (train_hr, train_hr_origins) = hr_sampler
        .sample_in(&p.hr, &hr_region, spec.n_train_hr)?
        .into_iter()
        .unzip();

    let mut test_pairs = Vec::with_capacity(spec.n_test);
    for _ in 0..spec.n_test {
        let o = PatchOrigin {
            z: rng.gen_range(test_region.z.clone()),
            row: rng.gen_range(0..=rows / s - LR_PATCH),
            col: rng.gen_range(0..=cols / s - LR_PATCH),
        };
        let lr = extract_patch(&p.lr, o, LR_PATCH)?;
        let hr = extract_patch(
            &p.hr,
            PatchOrigin {
                z: o.z,
                row: o.row * s,
                col: o.col * s,
            },
            HR_PATCH,
        )?;
        test_pairs.push(TestPair {
            lr,
            hr,
            origin_lr: o,
        });
    }
    Ok(UnpairedSplit {
        train_lr,
        train_hr,
        test_pairs,
        lr_region,
        hr_region,
        test_region,
        train_lr_origins,
        train_hr_origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims_hr: [6, 256, 256],
            n_tubes: 4,
            noise_sigma_hr: 0.0,
            noise_sigma_lr: 0.0,
            blur_sigma_lr: 0.0,
            seed,
        }
    }

    #[test]
    fn zero_degradation_is_pooling() {
        let p = generate_phantom(&small(1)).unwrap();
        for k in 0..6 {
            let expect = avg_pool_f(&p.hr.slice(k).unwrap(), ScaleFactor::SR).unwrap();
            assert_eq!(p.lr.slice(k).unwrap(), expect);
        }
    }

    #[test]
    fn seeded_and_bounded() {
        let spec = PhantomSpec {
            noise_sigma_hr: 0.05,
            noise_sigma_lr: 0.05,
            blur_sigma_lr: 1.5,
            ..small(2)
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.hr.data.iter().chain(&a.lr.data).all(|v| (-1.0..=1.0).contains(v)));
        let c = generate_phantom(&PhantomSpec { seed: 3, ..spec }).unwrap();
        assert_ne!(a.hr.data, c.hr.data);
    }

    #[test]
    fn empty_phantom_is_constant() {
        let spec = PhantomSpec {
            n_tubes: 0,
            ..small(4)
        };
        let p = generate_phantom(&spec).unwrap();
        assert!(p.hr.data.iter().all(|&v| v == p.hr.data[0]));
        assert!(p.lr.data.iter().all(|&v| v == p.lr.data[0]));
    }

    #[test]
    fn blur_preserves_slice_mean() {
        let spec = PhantomSpec {
            blur_sigma_lr: 3.0,
            ..small(5)
        };
        let p = generate_phantom(&spec).unwrap();
        for k in 0..6 {
            let m_hr = p.hr.slice(k).unwrap().mean();
            let m_lr = p.lr.slice(k).unwrap().mean();
            assert!((m_hr - m_lr).abs() < 1e-9, "{m_hr} vs {m_lr}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_phantom(&PhantomSpec { dims_hr: [2, 100, 256], ..small(0) }).is_err());
        assert!(generate_phantom(&PhantomSpec { noise_sigma_hr: -1.0, ..small(0) }).is_err());
    }

    #[test]
    fn split_is_disjoint_and_paired_on_test() {
        let spec = PhantomSpec {
            dims_hr: [8, 256, 256],
            ..small(6)
        };
        let p = generate_phantom(&spec).unwrap();
        let sp = SplitSpec {
            n_train_lr: 5,
            n_train_hr: 3,
            n_test: 4,
            foreground_threshold: 0.25,
        };
        let s = split_unpaired(&p, 9, &sp).unwrap();
        let overlap = s.lr_region.z.clone().filter(|z| s.hr_region.z.contains(z)).count();
        assert_eq!(overlap, 0);
        assert!(s.train_lr_origins.iter().all(|o| s.lr_region.z.contains(&o.z)));
        assert!(s.train_hr_origins.iter().all(|o| s.hr_region.z.contains(&o.z)));
        for pair in &s.test_pairs {
            assert!(s.test_region.z.contains(&pair.origin_lr.z));
            assert_eq!(pair.lr, avg_pool_f(&pair.hr, ScaleFactor::SR).unwrap());
        }
        let again = split_unpaired(&p, 9, &sp).unwrap();
        assert_eq!(again.train_lr, s.train_lr);
        assert_eq!(again.test_pairs, s.test_pairs);

        let tiny = generate_phantom(&PhantomSpec { dims_hr: [2, 256, 256], ..small(1) }).unwrap();
        assert!(split_unpaired(&tiny, 0, &sp).is_err());
    }
}
