//! Tiled inference: clinical slices are cut into model-sized patches, each
//! patch is super-resolved, and the outputs are blended back into one slice.

use std::path::{Path, PathBuf};

use font8x8::UnicodeFonts;
use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::data::{save_slice_png, Modality, RealVolume};
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::model::PatchMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    WeightedCosine,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSpec {
    pub patch: usize,
    pub stride: usize,
    pub blend: Blend,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            patch: 32,
            stride: 16,
            blend: Blend::WeightedCosine,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.stride > self.patch {
            return Err(Error::InvalidParameter(format!(
                "tile stride {} must lie in 1..={}",
                self.stride, self.patch
            )));
        }
        Ok(())
    }
}

/// Tile origins along one axis of a padded extent.
fn origins(padded: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..=(padded - patch) / stride).map(|k| k * stride).collect()
}

fn padded_len(len: usize, patch: usize, stride: usize) -> usize {
    len + (stride - (len - patch) % stride) % stride
}

fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

fn reflect_pad(x: &Grid2D, h: usize, w: usize) -> Grid2D {
    let (xh, xw) = x.dims();
    let v = x.values();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let row = &v[reflect(i, xh) * xw..][..xw];
        out.extend((0..w).map(|j| row[reflect(j, xw)]));
    }
    Grid2D::from_raw(h, w, out)
}

fn window(n: usize, blend: Blend) -> Vec<f64> {
    match blend {
        Blend::Uniform => vec![1.0; n],
        Blend::WeightedCosine => (0..n)
            .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin().powi(2))
            .collect(),
    }
}

/// Integer magnification of a patch map, checked to be the same on both axes.
pub fn scale_of(g: &impl PatchMap) -> Result<usize> {
    let (ih, iw) = g.input_dims();
    let (oh, ow) = g.output_dims();
    if ih == 0 || iw == 0 || oh % ih != 0 || ow % iw != 0 || oh / ih != ow / iw {
        return Err(Error::DimensionMismatch(format!(
            "patch map {ih}x{iw} -> {oh}x{ow} is not a uniform integer magnification"
        )));
    }
    Ok(oh / ih)
}

/// Super-resolves a whole slice with overlapping tiles.
pub fn sr_slice(slice: &Grid2D, g1: &impl PatchMap, t: &TileSpec) -> Result<Grid2D> {
    t.validate()?;
    if g1.input_dims() != (t.patch, t.patch) {
        return Err(Error::DimensionMismatch(format!(
            "model input {:?} does not match tile patch {}",
            g1.input_dims(),
            t.patch
        )));
    }
    let s = scale_of(g1)?;
    let (h, w) = slice.dims();
    if h < t.patch || w < t.patch {
        return Err(Error::DimensionMismatch(format!(
            "slice {h}x{w} is smaller than the {0}x{0} patch",
            t.patch
        )));
    }
    let (ph, pw) = (padded_len(h, t.patch, t.stride), padded_len(w, t.patch, t.stride));
    let padded = reflect_pad(slice, ph, pw);
    let op = t.patch * s;
    let blend = if t.stride == t.patch { Blend::Uniform } else { t.blend };
    let win = window(op, blend);
    let (oh, ow) = (ph * s, pw * s);
    let mut acc = vec![0.0; oh * ow];
    let mut wsum = vec![0.0; oh * ow];
    for &r in &origins(ph, t.patch, t.stride) {
        for &c in &origins(pw, t.patch, t.stride) {
            let y = g1.map_patch(&padded.crop(r, c, t.patch, t.patch)?)?;
            if y.dims() != (op, op) {
                return Err(Error::DimensionMismatch(format!(
                    "patch map returned {}x{}, expected {op}x{op}",
                    y.height(),
                    y.width()
                )));
            }
            for (i, yrow) in y.values().chunks_exact(op).enumerate() {
                let base = (r * s + i) * ow + c * s;
                let a = &mut acc[base..base + op];
                let ws = &mut wsum[base..base + op];
                for j in 0..op {
                    let wt = win[i] * win[j];
                    a[j] += wt * yrow[j];
                    ws[j] += wt;
                }
            }
        }
    }
    let (th, tw) = (h * s, w * s);
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let row = i * ow;
        out.extend((0..tw).map(|j| acc[row + j] / wsum[row + j]));
    }
    Grid2D::new(th, tw, out)
}

/// Where [`sr_volume`] writes its outputs.
#[derive(Debug, Clone)]
pub struct SrOutputs {
    pub volume_header: PathBuf,
    pub slice_pngs: Vec<PathBuf>,
}

pub const SR_VOLUME_FILE: &str = "sr_volume.mhd";
pub const SR_SLICE_DIR: &str = "sr_slices";

/// Runs [`sr_slice`] on every axial slice. With `out_dir` set, also writes a
/// 16-bit PNG per slice and the full volume.
pub fn sr_volume(
    v: &RealVolume,
    g1: &impl PatchMap,
    t: &TileSpec,
    out_dir: Option<&Path>,
) -> Result<(RealVolume, Option<SrOutputs>)> {
    let s = scale_of(g1)? as f64;
    let mut slices = Vec::with_capacity(v.n_slices());
    for k in 0..v.n_slices() {
        slices.push(sr_slice(&v.slice(k)?, g1, t)?);
        log::debug!("super-resolved slice {}/{}", k + 1, v.n_slices());
    }
    let spacing = [v.spacing[0], v.spacing[1] / s, v.spacing[2] / s];
    let sr = RealVolume::from_slices(&slices, spacing)?;
    let outputs = match out_dir {
        None => None,
        Some(dir) => {
            let mut pngs = Vec::with_capacity(slices.len());
            for (k, g) in slices.iter().enumerate() {
                let p = dir.join(SR_SLICE_DIR).join(format!("slice_{k:04}.png"));
                save_slice_png(g, &p)?;
                pngs.push(p);
            }
            let header = dir.join(SR_VOLUME_FILE);
            sr.save(&header, Modality::Micro)?;
            Some(SrOutputs {
                volume_header: header,
                slice_pngs: pngs,
            })
        }
    };
    Ok((sr, outputs))
}

pub const LABEL_BAND: usize = 12;
pub const PANEL_LABELS: [&str; 4] = ["(a) original", "(b) proposed", "(c) bicubic", "(d) cyclegan"];

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn draw_text(img: &mut GrayImage, x0: usize, y0: usize, max_w: usize, text: &str) {
    for (k, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else {
            continue;
        };
        for (gy, bits) in glyph.iter().enumerate() {
            for gx in 0..8 {
                let x = k * 8 + gx;
                if bits >> gx & 1 == 1 && x < max_w {
                    img.put_pixel((x0 + x) as u32, (y0 + gy) as u32, Luma([255]));
                }
            }
        }
    }
}

/// Lays out the panels in reading order: 2x2 when all four are present,
/// a single row of three when the baseline is missing. Each panel sits
/// under its own label band.
pub fn compose_montage(
    original: &Grid2D,
    sr: &Grid2D,
    bicubic: &Grid2D,
    baseline_sr: Option<&Grid2D>,
) -> Result<GrayImage> {
    let mut panels = vec![original, sr, bicubic];
    panels.extend(baseline_sr);
    let (h, w) = original.dims();
    if let Some(p) = panels.iter().find(|p| p.dims() != (h, w)) {
        return Err(Error::DimensionMismatch(format!(
            "montage panels must share one shape: {}x{} vs {h}x{w}",
            p.height(),
            p.width()
        )));
    }
    let cols = if panels.len() == 4 { 2 } else { 3 };
    let rows = panels.len().div_ceil(cols);
    let cell_h = h + LABEL_BAND;
    let mut img = GrayImage::new((cols * w) as u32, (rows * cell_h) as u32);
    for (k, p) in panels.iter().enumerate() {
        let (x0, y0) = ((k % cols) * w, (k / cols) * cell_h);
        draw_text(&mut img, x0 + 2, y0 + 2, w.saturating_sub(2), PANEL_LABELS[k]);
        for (i, row) in p.values().chunks_exact(w).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                img.put_pixel((x0 + j) as u32, (y0 + LABEL_BAND + i) as u32, Luma([to_u8(v)]));
            }
        }
    }
    Ok(img)
}

pub fn montage(
    original: &Grid2D,
    sr: &Grid2D,
    bicubic: &Grid2D,
    baseline_sr: Option<&Grid2D>,
    path: &Path,
) -> Result<()> {
    let img = compose_montage(original, sr, bicubic, baseline_sr)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other.to_string()),
        })
}
