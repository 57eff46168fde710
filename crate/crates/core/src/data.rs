//! Volume I/O (MetaImage header + raw little-endian payload), intensity
//! normalization for the clinical and micro-CT domains, unpaired patch
//! sampling and 16-bit PNG slice output.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Clinical,
    Micro,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Clinical => "clinical",
            Modality::Micro => "micro",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    I16(Vec<i16>),
    U16(Vec<u16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::I16(v) => v.len(),
            VoxelData::U16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
            VoxelData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn element_type(&self) -> &'static str {
        match self {
            VoxelData::I16(_) => "MET_SHORT",
            VoxelData::U16(_) => "MET_USHORT",
            VoxelData::F32(_) => "MET_FLOAT",
            VoxelData::F64(_) => "MET_DOUBLE",
        }
    }

    fn element_size(ty: &str) -> Result<usize> {
        match ty {
            "MET_SHORT" | "MET_USHORT" => Ok(2),
            "MET_FLOAT" => Ok(4),
            "MET_DOUBLE" => Ok(8),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            VoxelData::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            VoxelData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            VoxelData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            VoxelData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(ty: &str, bytes: &[u8]) -> Result<Self> {
        Ok(match ty {
            "MET_SHORT" => VoxelData::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            "MET_USHORT" => VoxelData::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            "MET_FLOAT" => VoxelData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "MET_DOUBLE" => VoxelData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(Error::UnsupportedElementType(other.to_string())),
        })
    }

    fn is_float(&self) -> bool {
        matches!(self, VoxelData::F32(_) | VoxelData::F64(_))
    }
}

/// Scanner volume: `(slices, rows, cols)` voxels with `(z, y, x)` spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub data: VoxelData,
}

/// Acquisition profile of one modality.
#[derive(Debug, Clone, Copy)]
pub struct Profile {
    pub in_plane: usize,
    pub slices: (usize, usize),
    pub pixel_mm: (f64, f64),
    pub thickness_mm: (f64, f64),
}

pub const CLINICAL_PROFILE: Profile = Profile {
    in_plane: 512,
    slices: (435, 554),
    pixel_mm: (0.625, 0.625),
    thickness_mm: (0.6, 0.6),
};

pub const MICRO_PROFILE: Profile = Profile {
    in_plane: 1024,
    slices: (545, 1082),
    pixel_mm: (0.034, 0.053),
    thickness_mm: (0.034, 0.053),
};

/// Relative slack on single-valued spacings.
const SPACING_TOLERANCE: f64 = 0.05;

impl Modality {
    pub fn profile(self) -> Profile {
        match self {
            Modality::Clinical => CLINICAL_PROFILE,
            Modality::Micro => MICRO_PROFILE,
        }
    }
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo * (1.0 - SPACING_TOLERANCE) && v <= hi * (1.0 + SPACING_TOLERANCE)
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], modality: Modality, data: VoxelData) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter(format!("volume dims must be positive: {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "volume spacing must be positive: {spacing:?}"
            )));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::SizeMismatch(format!(
                "{dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            modality,
            data,
        })
    }

    /// Deviations from the modality's acquisition profile. An empty list means
    /// the volume matches; deviations are warnings, not errors.
    pub fn profile_warnings(&self) -> Vec<String> {
        let p = self.modality.profile();
        let mut w = Vec::new();
        let [z, y, x] = self.spacing;
        for (axis, v) in [("x", x), ("y", y)] {
            if !within(v, p.pixel_mm) {
                w.push(format!(
                    "{} pixel spacing {axis}={v} mm outside {:?} mm",
                    self.modality, p.pixel_mm
                ));
            }
        }
        if !within(z, p.thickness_mm) {
            w.push(format!(
                "{} slice thickness {z} mm outside {:?} mm",
                self.modality, p.thickness_mm
            ));
        }
        let [s, r, c] = self.dims;
        if r != p.in_plane || c != p.in_plane {
            w.push(format!(
                "{} slice is {r}x{c}, expected {}x{}",
                self.modality, p.in_plane, p.in_plane
            ));
        }
        if s < p.slices.0 || s > p.slices.1 {
            w.push(format!(
                "{} volume has {s} slices, expected {}..={}",
                self.modality, p.slices.0, p.slices.1
            ));
        }
        w
    }
}

/// Real-valued volume, e.g. normalized intensities or model output.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

impl RealVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || data.len() != dims.iter().product::<usize>() {
            return Err(Error::SizeMismatch(format!(
                "{dims:?} volume with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume contains non-finite values".into()));
        }
        Ok(RealVolume { dims, spacing, data })
    }

    pub fn from_slices(slices: &[Grid2D], spacing: [f64; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidParameter("no slices".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.dims() != (h, w) {
                return Err(Error::DimensionMismatch(format!(
                    "slice {}x{} differs from {h}x{w}",
                    s.height(),
                    s.width()
                )));
            }
            data.extend_from_slice(s.values());
        }
        RealVolume::new([slices.len(), h, w], spacing, data)
    }

    pub fn n_slices(&self) -> usize {
        self.dims[0]
    }

    pub fn slice(&self, k: usize) -> Result<Grid2D> {
        let [s, h, w] = self.dims;
        if k >= s {
            return Err(Error::InvalidParameter(format!("slice {k} out of range 0..{s}")));
        }
        Grid2D::new(h, w, self.data[k * h * w..(k + 1) * h * w].to_vec())
    }

    pub fn slices(&self) -> Result<Vec<Grid2D>> {
        (0..self.n_slices()).map(|k| self.slice(k)).collect()
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Stores as `MET_DOUBLE` so that save/load is lossless.
    pub fn to_volume(&self, modality: Modality) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            modality,
            data: VoxelData::F64(self.data.clone()),
        }
    }

    pub fn save(&self, header: &Path, modality: Modality) -> Result<()> {
        save_volume(&self.to_volume(modality), header)
    }
}

fn raw_path_for(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `<name>.mhd` plus `<name>.raw` next to it.
pub fn save_volume(v: &Volume, header: &Path) -> Result<()> {
    let raw = raw_path_for(header);
    let raw_name = raw
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Header(format!("bad file name {}", raw.display())))?
        .to_string();
    let [s, r, c] = v.dims;
    let [z, y, x] = v.spacing;
    let text = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         DimSize = {c} {r} {s}\n\
         ElementSpacing = {x} {y} {z}\n\
         ElementType = {}\n\
         ElementDataFile = {raw_name}\n",
        v.data.element_type()
    );
    if let Some(dir) = header.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(header, text).map_err(|e| Error::io(header, e))?;
    std::fs::write(&raw, v.data.to_le_bytes()).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    element_type: String,
    data_file: String,
}

fn parse_header(text: &str) -> Result<Header> {
    let mut ndims = None;
    let mut dim_size: Option<Vec<usize>> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut element_type = None;
    let mut data_file = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Header(format!("line without `=`: {line}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                ndims = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| Error::Header(format!("bad NDims `{value}`")))?,
                )
            }
            "DimSize" => {
                dim_size = Some(
                    value
                        .split_whitespace()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Header(format!("bad DimSize `{value}`")))?,
                )
            }
            "ElementSpacing" | "ElementSize" => {
                spacing = Some(
                    value
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Header(format!("bad ElementSpacing `{value}`")))?,
                )
            }
            "ElementType" => element_type = Some(value.to_string()),
            "ElementDataFile" => data_file = Some(value.to_string()),
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(Error::Header("big-endian payloads are not supported".into()));
                }
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(Error::Header("compressed payloads are not supported".into()));
                }
            }
            _ => {}
        }
    }
    let ndims = ndims.ok_or_else(|| Error::Header("missing NDims".into()))?;
    if !(ndims == 2 || ndims == 3) {
        return Err(Error::Header(format!("NDims must be 2 or 3, got {ndims}")));
    }
    let ds = dim_size.ok_or_else(|| Error::Header("missing DimSize".into()))?;
    if ds.len() != ndims {
        return Err(Error::Header(format!("DimSize has {} entries for NDims {ndims}", ds.len())));
    }
    let sp = spacing.unwrap_or_else(|| vec![1.0; ndims]);
    if sp.len() != ndims {
        return Err(Error::Header(format!(
            "ElementSpacing has {} entries for NDims {ndims}",
            sp.len()
        )));
    }
    let dims = [if ndims == 3 { ds[2] } else { 1 }, ds[1], ds[0]];
    let spacing = [if ndims == 3 { sp[2] } else { 1.0 }, sp[1], sp[0]];
    Ok(Header {
        dims,
        spacing,
        element_type: element_type.ok_or_else(|| Error::Header("missing ElementType".into()))?,
        data_file: data_file.ok_or_else(|| Error::Header("missing ElementDataFile".into()))?,
    })
}

fn infer_modality(data: &VoxelData, spacing: [f64; 3]) -> Modality {
    match data {
        VoxelData::I16(_) => Modality::Clinical,
        VoxelData::U16(_) => Modality::Micro,
        _ if spacing[2] < 0.2 => Modality::Micro,
        _ => Modality::Clinical,
    }
}

/// Reads a MetaImage header and its raw payload. Profile deviations are
/// logged as warnings.
pub fn load_volume(header: &Path) -> Result<Volume> {
    if !header.exists() {
        return Err(Error::MissingFile(header.to_path_buf()));
    }
    let text = std::fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let h = parse_header(&text)?;
    if h.data_file.eq_ignore_ascii_case("LOCAL") {
        return Err(Error::Header("inline (LOCAL) payloads are not supported".into()));
    }
    let elem = VoxelData::element_size(&h.element_type)?;
    let raw = header
        .parent()
        .map(|d| d.join(&h.data_file))
        .unwrap_or_else(|| PathBuf::from(&h.data_file));
    if !raw.exists() {
        return Err(Error::MissingFile(raw));
    }
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = h.dims.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch(format!(
            "{} holds {} bytes, header {:?} x {} needs {expected}",
            raw.display(),
            bytes.len(),
            h.dims,
            h.element_type
        )));
    }
    let data = VoxelData::from_le_bytes(&h.element_type, &bytes)?;
    let modality = infer_modality(&data, h.spacing);
    let v = Volume::new(h.dims, h.spacing, modality, data)?;
    for w in v.profile_warnings() {
        log::warn!("{}: {w}", header.display());
    }
    Ok(v)
}

/// Reads a volume and converts it to real values without normalization.
pub fn load_real_volume(header: &Path) -> Result<RealVolume> {
    let v = load_volume(header)?;
    let data = match v.data {
        VoxelData::I16(d) => d.into_iter().map(f64::from).collect(),
        VoxelData::U16(d) => d.into_iter().map(f64::from).collect(),
        VoxelData::F32(d) => d.into_iter().map(f64::from).collect(),
        VoxelData::F64(d) => d,
    };
    RealVolume::new(v.dims, v.spacing, data)
}

/// Lung window applied to clinical Hounsfield units.
pub const HU_WINDOW: (f64, f64) = (-1000.0, 400.0);
/// Percentiles mapped to `[-1, 1]` for micro-CT volumes.
pub const MICRO_PERCENTILES: (f64, f64) = (0.01, 0.99);

fn window_map(v: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// Nearest-rank percentile `q` in `[0, 1]` of a sorted slice.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Maps a volume into `[-1, 1]`. Clinical volumes use the fixed HU window;
/// micro-CT volumes use their own 1st-99th percentile range. Floating-point
/// volumes are taken as already normalized and only clipped.
pub fn normalize(v: &Volume) -> Result<RealVolume> {
    let raw: Vec<f64> = match &v.data {
        VoxelData::I16(d) => d.iter().map(|&x| f64::from(x)).collect(),
        VoxelData::U16(d) => d.iter().map(|&x| f64::from(x)).collect(),
        VoxelData::F32(d) => d.iter().map(|&x| f64::from(x)).collect(),
        VoxelData::F64(d) => d.clone(),
    };
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("volume contains non-finite voxels".into()));
    }
    let data = if v.data.is_float() {
        raw.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect()
    } else {
        match v.modality {
            Modality::Clinical => raw
                .into_iter()
                .map(|x| window_map(x, HU_WINDOW.0, HU_WINDOW.1))
                .collect(),
            Modality::Micro => {
                let mut sorted = raw.clone();
                sorted.sort_by(f64::total_cmp);
                let lo = percentile_sorted(&sorted, MICRO_PERCENTILES.0);
                let hi = percentile_sorted(&sorted, MICRO_PERCENTILES.1);
                if hi <= lo {
                    return Err(Error::DegenerateWindow(format!(
                        "micro-CT percentiles p1 = p99 = {lo}"
                    )));
                }
                raw.into_iter().map(|x| window_map(x, lo, hi)).collect()
            }
        }
    };
    RealVolume::new(v.dims, v.spacing, data)
}

/// Normalized intensity at or below which a voxel counts as air.
pub const AIR_LEVEL: f64 = -0.95;
/// Extra attempts per patch before sampling gives up.
pub const MAX_RETRIES: usize = 100;

/// Axis-aligned sub-volume, `(z, rows, cols)` half-open ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub z: Range<usize>,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Region {
    pub fn whole(v: &RealVolume) -> Self {
        Region {
            z: 0..v.dims[0],
            rows: 0..v.dims[1],
            cols: 0..v.dims[2],
        }
    }
}

/// Draws axial square patches at uniformly random offsets.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    pub patch_size: usize,
    pub foreground_threshold: f64,
    rng: ChaCha8Rng,
}

/// Location of a sampled patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub z: usize,
    pub row: usize,
    pub col: usize,
}

impl PatchSampler {
    pub fn new(patch_size: usize, foreground_threshold: f64, rng_seed: u64) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidParameter("patch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&foreground_threshold) {
            return Err(Error::InvalidParameter(format!(
                "foreground threshold must lie in [0, 1], got {foreground_threshold}"
            )));
        }
        Ok(PatchSampler {
            patch_size,
            foreground_threshold,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn sample(&mut self, v: &RealVolume, n: usize) -> Result<Vec<Grid2D>> {
        Ok(self
            .sample_in(v, &Region::whole(v), n)?
            .into_iter()
            .map(|(g, _)| g)
            .collect())
    }

    /// Samples `n` patches whose footprint lies inside `region`.
    pub fn sample_in(
        &mut self,
        v: &RealVolume,
        region: &Region,
        n: usize,
    ) -> Result<Vec<(Grid2D, PatchOrigin)>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let p = self.patch_size;
        let fits = region.z.end <= v.dims[0]
            && region.rows.end <= v.dims[1]
            && region.cols.end <= v.dims[2]
            && !region.z.is_empty()
            && region.rows.len() >= p
            && region.cols.len() >= p;
        if !fits {
            return Err(Error::DimensionMismatch(format!(
                "{p}x{p} patches do not fit region {region:?} of {:?} volume",
                v.dims
            )));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut found = None;
            for _ in 0..=MAX_RETRIES {
                let origin = PatchOrigin {
                    z: self.rng.gen_range(region.z.clone()),
                    row: self.rng.gen_range(region.rows.start..=region.rows.end - p),
                    col: self.rng.gen_range(region.cols.start..=region.cols.end - p),
                };
                let patch = extract_patch(v, origin, p)?;
                let fg = patch.values().iter().filter(|&&x| x > AIR_LEVEL).count() as f64
                    / patch.len() as f64;
                if fg >= self.foreground_threshold {
                    found = Some((patch, origin));
                    break;
                }
            }
            match found {
                Some(item) => out.push(item),
                None => {
                    return Err(Error::ForegroundExhausted {
                        threshold: self.foreground_threshold,
                        retries: MAX_RETRIES,
                    })
                }
            }
        }
        Ok(out)
    }
}

pub fn extract_patch(v: &RealVolume, o: PatchOrigin, p: usize) -> Result<Grid2D> {
    let [s, h, w] = v.dims;
    if o.z >= s || o.row + p > h || o.col + p > w {
        return Err(Error::DimensionMismatch(format!(
            "patch at {o:?} exceeds volume {:?}",
            v.dims
        )));
    }
    let mut vals = Vec::with_capacity(p * p);
    for r in o.row..o.row + p {
        let start = (o.z * h + r) * w + o.col;
        vals.extend_from_slice(&v.data[start..start + p]);
    }
    Grid2D::new(p, p, vals)
}

/// Free-function form of [`PatchSampler::sample`].
pub fn sample_patches(v: &RealVolume, sampler: &mut PatchSampler, n: usize) -> Result<Vec<Grid2D>> {
    sampler.sample(v, n)
}

fn to_u16(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

/// Writes a 16-bit grayscale PNG with `[-1, 1]` mapped onto `[0, 65535]`.
pub fn save_slice_png(g: &Grid2D, path: &Path) -> Result<()> {
    let (h, w) = g.dims();
    let pixels: Vec<u16> = g.values().iter().map(|&v| to_u16(v)).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Image("pixel buffer size mismatch".into()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other.to_string()),
        })
}

/// Inverse of [`save_slice_png`].
pub fn load_slice_png(path: &Path) -> Result<Grid2D> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let vals = img
        .into_raw()
        .into_iter()
        .map(|p| f64::from(p) / 65535.0 * 2.0 - 1.0)
        .collect();
    Grid2D::new(h as usize, w as usize, vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn small_volume_roundtrips_bit_exact() {
        let dir = tmp();
        let data: Vec<i16> = (0..64).map(|i| (i * 37 % 2000) as i16 - 1000).collect();
        let v = Volume::new([4, 4, 4], [0.6, 0.625, 0.625], Modality::Clinical, VoxelData::I16(data)).unwrap();
        let path = dir.path().join("v.mhd");
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);

        let data: Vec<u16> = (0..60).map(|i| (i * 911 % 65535) as u16).collect();
        let v = Volume::new([3, 4, 5], [0.04, 0.04, 0.04], Modality::Micro, VoxelData::U16(data)).unwrap();
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
    }

    #[test]
    fn header_uses_metaimage_keys() {
        let dir = tmp();
        let v = Volume::new([2, 3, 4], [0.6, 0.625, 0.625], Modality::Clinical, VoxelData::I16(vec![0; 24])).unwrap();
        let path = dir.path().join("h.mhd");
        save_volume(&v, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["NDims = 3", "DimSize = 4 3 2", "ElementSpacing = 0.625 0.625 0.6", "ElementType = MET_SHORT", "ElementDataFile = h.raw"] {
            assert!(text.contains(key), "{key} missing in\n{text}");
        }
    }

    #[test]
    fn clinical_profile_volume_loads() {
        let dir = tmp();
        let hdr = dir.path().join("ct.mhd");
        std::fs::write(
            &hdr,
            "NDims = 3\nDimSize = 512 512 435\nElementSpacing = 0.625 0.625 0.6\nElementType = MET_SHORT\nElementDataFile = ct.raw\n",
        )
        .unwrap();
        let f = std::fs::File::create(dir.path().join("ct.raw")).unwrap();
        f.set_len(512 * 512 * 435 * 2).unwrap();
        let v = load_volume(&hdr).unwrap();
        assert_eq!(v.dims, [435, 512, 512]);
        assert_eq!(v.modality, Modality::Clinical);
        assert!(v.profile_warnings().is_empty(), "{:?}", v.profile_warnings());
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tmp();
        let hdr = dir.path().join("x.mhd");
        assert!(matches!(load_volume(&hdr), Err(Error::MissingFile(_))));

        std::fs::write(&hdr, "NDims = 3\nDimSize = 4 4 4\nElementType = MET_SHORT\nElementDataFile = x.raw\n").unwrap();
        assert!(matches!(load_volume(&hdr), Err(Error::MissingFile(_))));
        std::fs::write(dir.path().join("x.raw"), vec![0u8; 127]).unwrap();
        assert!(matches!(load_volume(&hdr), Err(Error::SizeMismatch(_))));

        std::fs::write(&hdr, "NDims = 3\nDimSize = 4 4 4\nElementType = MET_UCHAR\nElementDataFile = x.raw\n").unwrap();
        assert!(matches!(load_volume(&hdr), Err(Error::UnsupportedElementType(_))));
    }

    #[test]
    fn clinical_window() {
        let v = Volume::new(
            [1, 1, 4],
            [0.6, 0.625, 0.625],
            Modality::Clinical,
            VoxelData::I16(vec![-1000, 400, -300, 2000]),
        )
        .unwrap();
        let n = normalize(&v).unwrap();
        assert_eq!(n.data, vec![-1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn micro_percentile_window() {
        let data: Vec<u16> = (0..1000).map(|i| i as u16).collect();
        let v = Volume::new([10, 10, 10], [0.04; 3], Modality::Micro, VoxelData::U16(data)).unwrap();
        let n = normalize(&v).unwrap();
        // p1 = 10, p99 = 989
        assert_eq!(n.data[10], -1.0);
        assert_eq!(n.data[989], 1.0);
        assert_eq!(n.data[0], -1.0);
        assert!(n.data.iter().all(|x| (-1.0..=1.0).contains(x)));

        let flat = Volume::new([2, 2, 2], [0.04; 3], Modality::Micro, VoxelData::U16(vec![7; 8])).unwrap();
        assert!(matches!(normalize(&flat), Err(Error::DegenerateWindow(_))));
    }

    #[test]
    fn normalize_is_monotone() {
        let raw: Vec<i16> = (-1500..2500).step_by(7).map(|x| x as i16).collect();
        let n = raw.len();
        let v = Volume::new([1, 1, n], [0.6, 0.625, 0.625], Modality::Clinical, VoxelData::I16(raw)).unwrap();
        let out = normalize(&v).unwrap();
        assert!(out.data.windows(2).all(|w| w[0] <= w[1]));
    }

    fn test_volume() -> RealVolume {
        let dims = [3, 40, 40];
        let data = (0..dims.iter().product::<usize>())
            .map(|i| ((i as f64) * 0.37).sin() * 0.9)
            .collect();
        RealVolume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn sampling_shapes_and_determinism() {
        let v = test_volume();
        let mut s = PatchSampler::new(32, 0.25, 5).unwrap();
        assert!(sample_patches(&v, &mut s, 0).unwrap().is_empty());
        let a = sample_patches(&v, &mut PatchSampler::new(32, 0.25, 5).unwrap(), 8).unwrap();
        let b = sample_patches(&v, &mut PatchSampler::new(32, 0.25, 5).unwrap(), 8).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.dims() == (32, 32)));
        assert!(a.iter().flat_map(|p| p.values()).all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn all_air_exhausts_retries() {
        let v = RealVolume::new([2, 40, 40], [1.0; 3], vec![-1.0; 3200]).unwrap();
        let mut s = PatchSampler::new(32, 0.5, 1).unwrap();
        let err = s.sample(&v, 1).unwrap_err();
        assert!(matches!(err, Error::ForegroundExhausted { .. }));
        assert!(err.to_string().contains("0.5"));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tmp();
        let path = dir.path().join("s.png");
        save_slice_png(&Grid2D::filled(3, 5, -1.0).unwrap(), &path).unwrap();
        let img = image::open(&path).unwrap().into_luma16();
        assert!(img.pixels().all(|p| p.0[0] == 0));
        save_slice_png(&Grid2D::filled(3, 5, 1.0).unwrap(), &path).unwrap();
        let img = image::open(&path).unwrap().into_luma16();
        assert_eq!(img.dimensions(), (5, 3));
        assert!(img.pixels().all(|p| p.0[0] == 65535));

        let g = Grid2D::from_fn(17, 9, |i, j| ((i * 9 + j) as f64 * 0.013).sin()).unwrap();
        save_slice_png(&g, &path).unwrap();
        let back = load_slice_png(&path).unwrap();
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 65535.0 + 1e-15);
        }
        assert!(save_slice_png(&g, Path::new("/proc/forbidden/x.png")).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn i16_volumes_roundtrip(data in proptest::collection::vec(any::<i16>(), 24)) {
                let dir = tempfile::tempdir().unwrap();
                let v = Volume::new([2, 3, 4], [0.6, 0.625, 0.625], Modality::Clinical, VoxelData::I16(data)).unwrap();
                let p = dir.path().join("p.mhd");
                save_volume(&v, &p).unwrap();
                prop_assert_eq!(load_volume(&p).unwrap(), v);
            }

            #[test]
            fn clinical_normalize_in_range(data in proptest::collection::vec(any::<i16>(), 8)) {
                let v = Volume::new([2, 2, 2], [0.6, 0.625, 0.625], Modality::Clinical, VoxelData::I16(data)).unwrap();
                let n = normalize(&v).unwrap();
                prop_assert!(n.data.iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
    }
}
