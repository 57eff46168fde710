//! Layer kernels with forward caches and reverse-mode backward passes.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Channel-major activation tensor for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }
}

/// One entry of a topology descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    InstanceNorm,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    /// `x + body(x)`; the body must preserve the shape.
    Residual {
        body: Vec<Layer>,
    },
    /// `upsample_nearest(x, factor) + body(x)`; the body must enlarge by `factor`.
    UpsampleResidual {
        factor: usize,
        body: Vec<Layer>,
    },
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::Residual { body } | Layer::UpsampleResidual { body, .. } => {
                body.iter().map(Layer::param_count).sum()
            }
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels != input.channels {
                    return Err(Error::DimensionMismatch(format!(
                        "conv expects {in_channels} input channels, got {}",
                        input.channels
                    )));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(Error::InvalidParameter(
                        "conv kernel, stride and channels must be positive".into(),
                    ));
                }
                let (ph, pw) = (input.height + 2 * padding, input.width + 2 * padding);
                if ph < kernel || pw < kernel {
                    return Err(Error::DimensionMismatch(format!(
                        "conv kernel {kernel} larger than padded input {ph}x{pw}"
                    )));
                }
                Ok(Shape::new(
                    out_channels,
                    (ph - kernel) / stride + 1,
                    (pw - kernel) / stride + 1,
                ))
            }
            Layer::UpsampleNearest { factor } => {
                if factor == 0 {
                    return Err(Error::InvalidParameter("upsample factor must be >= 1".into()));
                }
                Ok(Shape::new(
                    input.channels,
                    input.height * factor,
                    input.width * factor,
                ))
            }
            Layer::Residual { ref body } => {
                let out = body
                    .iter()
                    .try_fold(input, |s, layer| layer.output_shape(s))?;
                if out != input {
                    return Err(Error::DimensionMismatch(format!(
                        "residual body maps {input} to {out}"
                    )));
                }
                Ok(out)
            }
            Layer::UpsampleResidual { factor, ref body } => {
                let want = Layer::UpsampleNearest { factor }.output_shape(input)?;
                let out = body
                    .iter()
                    .try_fold(input, |s, layer| layer.output_shape(s))?;
                if out != want {
                    return Err(Error::DimensionMismatch(format!(
                        "upsampling residual body maps {input} to {out}, expected {want}"
                    )));
                }
                Ok(out)
            }
            _ => Ok(input),
        }
    }
}

/// Per-layer state retained by the forward pass for the backward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    Conv { cols: Vec<f64>, input: Shape },
    DirectConv { input: Tensor },
    Upsample { input: Shape },
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu { input: Vec<f64> },
    LeakyRelu { input: Vec<f64> },
    Tanh { output: Vec<f64> },
    Residual { caches: Vec<Cache> },
    UpsampleResidual { caches: Vec<Cache>, input: Shape },
}

fn upsample_nearest(x: &Tensor, factor: usize) -> Vec<f64> {
    let s = x.shape;
    let mut out = Vec::with_capacity(s.numel() * factor * factor);
    for plane in x.data.chunks_exact(s.height * s.width) {
        for i in 0..s.height * factor {
            let row = &plane[(i / factor) * s.width..(i / factor + 1) * s.width];
            for &v in row {
                out.extend(std::iter::repeat(v).take(factor));
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `factor`x`factor` block.
fn upsample_adjoint(grad: &[f64], s: Shape, factor: usize) -> Vec<f64> {
    let ow = s.width * factor;
    let oh = s.height * factor;
    let mut out = vec![0.0; s.numel()];
    for c in 0..s.channels {
        let src = &grad[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut out[c * s.height * s.width..(c + 1) * s.height * s.width];
        for i in 0..oh {
            let drow = &mut dst[(i / factor) * s.width..(i / factor + 1) * s.width];
            for (d, block) in drow.iter_mut().zip(src[i * ow..(i + 1) * ow].chunks_exact(factor)) {
                *d += block.iter().sum::<f64>();
            }
        }
    }
    out
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: Shape,
    output: Shape,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.output.height * self.output.width
    }
}

/// Input split into `stride x stride` decimated phase planes per channel,
/// zero-padded to a common size, so every kernel tap reads a contiguous row.
struct Phases<'a> {
    data: Cow<'a, [f64]>,
    ph: usize,
    pw: usize,
}

fn split_phases<'a>(x: &'a [f64], g: &ConvGeom) -> Phases<'a> {
    let (h, w, s) = (g.input.height, g.input.width, g.stride);
    if s == 1 {
        return Phases {
            data: Cow::Borrowed(x),
            ph: h,
            pw: w,
        };
    }
    let (ph, pw) = (h.div_ceil(s), w.div_ceil(s));
    let mut data = vec![0.0; g.cin * s * s * ph * pw];
    for c in 0..g.cin {
        for i in 0..h {
            let row = &x[(c * h + i) * w..(c * h + i + 1) * w];
            for px in 0..s {
                let plane = (c * s + i % s) * s + px;
                let dst = &mut data[(plane * ph + i / s) * pw..][..pw];
                for (d, &v) in dst.iter_mut().zip(row.iter().skip(px).step_by(s)) {
                    *d = v;
                }
            }
        }
    }
    Phases {
        data: Cow::Owned(data),
        ph,
        pw,
    }
}

/// Inverse of [`split_phases`] for gradients: drops the zero padding.
fn merge_phases(d: &[f64], g: &ConvGeom, ph: usize, pw: usize) -> Vec<f64> {
    let (h, w, s) = (g.input.height, g.input.width, g.stride);
    let mut out = vec![0.0; g.input.numel()];
    for c in 0..g.cin {
        for i in 0..h {
            let row = &mut out[(c * h + i) * w..(c * h + i + 1) * w];
            for px in 0..s {
                let plane = (c * s + i % s) * s + px;
                let src = &d[(plane * ph + i / s) * pw..][..pw];
                for (o, &v) in row.iter_mut().skip(px).step_by(s).zip(src) {
                    *o = v;
                }
            }
        }
    }
    out
}

/// Where kernel tap `(ky, kx)` of input channel `ci` reads: the phase plane
/// offset, the row and column shifts, and the valid output spans.
struct Tap {
    plane: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    dy: isize,
    dx: isize,
}

fn tap(g: &ConvGeom, ph: usize, pw: usize, ci: usize, ky: usize, kx: usize) -> Tap {
    let s = g.stride as isize;
    let oy = ky as isize - g.pad as isize;
    let ox = kx as isize - g.pad as isize;
    let (py, dy) = (oy.rem_euclid(s) as usize, oy.div_euclid(s));
    let (px, dx) = (ox.rem_euclid(s) as usize, ox.div_euclid(s));
    let valid = |shift: isize, n: usize, on: usize| {
        let lo = (-shift).max(0) as usize;
        let hi = (n as isize - shift).clamp(0, on as isize) as usize;
        (lo.min(hi), hi)
    };
    Tap {
        plane: ((ci * g.stride + py) * g.stride + px) * ph * pw,
        rows: valid(dy, ph, g.output.height),
        cols: valid(dx, pw, g.output.width),
        dy,
        dx,
    }
}

fn dot4(x: &[f64], y: &[f64]) -> f64 {
    let y = &y[..x.len()];
    let mut acc = [0.0; 4];
    let split = x.len() / 4 * 4;
    for (a, b) in x[..split].chunks_exact(4).zip(y[..split].chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = x[split..].iter().zip(&y[split..]).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Direct convolution as row axpys over phase planes.
fn direct_forward(x: &[f64], weights: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.output.height, g.output.width);
    let Phases { data, ph, pw } = split_phases(x, g);
    let mut out = Vec::with_capacity(g.cout * oh * ow);
    for &b in bias {
        out.extend(std::iter::repeat(b).take(oh * ow));
    }
    for co in 0..g.cout {
        let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weights[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                    let t = tap(g, ph, pw, ci, ky, kx);
                    let (lo, hi) = t.cols;
                    for oy in t.rows.0..t.rows.1 {
                        let r = t.plane + (oy as isize + t.dy) as usize * pw;
                        let c0 = (lo as isize + t.dx) as usize;
                        let src = &data[r + c0..r + c0 + (hi - lo)];
                        for (d, &v) in oplane[oy * ow + lo..oy * ow + hi].iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn direct_backward(
    x: &[f64],
    weights: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    param_grad: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let (oh, ow) = (g.output.height, g.output.width);
    let Phases { data, ph, pw } = split_phases(x, g);
    if let Some(pg) = param_grad {
        let (gw, gb) = pg.split_at_mut(g.cout * g.cin * g.k * g.k);
        for co in 0..g.cout {
            let dplane = &dy[co * oh * ow..(co + 1) * oh * ow];
            gb[co] += dplane.iter().sum::<f64>();
            for ci in 0..g.cin {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let t = tap(g, ph, pw, ci, ky, kx);
                        let (lo, hi) = t.cols;
                        let mut acc = 0.0;
                        for oy in t.rows.0..t.rows.1 {
                            let r = t.plane + (oy as isize + t.dy) as usize * pw;
                            let c0 = (lo as isize + t.dx) as usize;
                            acc += dot4(&dplane[oy * ow + lo..oy * ow + hi], &data[r + c0..]);
                        }
                        gw[((co * g.cin + ci) * g.k + ky) * g.k + kx] += acc;
                    }
                }
            }
        }
    }
    if !want_input {
        return None;
    }
    let mut dphase = vec![0.0; data.len()];
    for ci in 0..g.cin {
        for co in 0..g.cout {
            let dplane = &dy[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weights[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                    let t = tap(g, ph, pw, ci, ky, kx);
                    let (lo, hi) = t.cols;
                    for oy in t.rows.0..t.rows.1 {
                        let r = t.plane + (oy as isize + t.dy) as usize * pw;
                        let c0 = (lo as isize + t.dx) as usize;
                        let dst = &mut dphase[r + c0..r + c0 + (hi - lo)];
                        for (o, &v) in dst.iter_mut().zip(&dplane[oy * ow + lo..oy * ow + hi]) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
    if g.stride == 1 {
        Some(dphase)
    } else {
        Some(merge_phases(&dphase, g, ph, pw))
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (h, w) = (g.input.height as isize, g.input.width as isize);
    let (oh, ow) = (g.output.height, g.output.width);
    let n = oh * ow;
    let mut cols = vec![0.0; g.cols_rows() * n];
    for c in 0..g.cin {
        let plane = &x[c * (h * w) as usize..(c + 1) * (h * w) as usize];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let off = kx as isize - g.pad as isize;
                    if g.stride == 1 {
                        // contiguous span of valid columns
                        let lo = (-off).max(0) as usize;
                        let hi = ((w - off).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (h, w) = (g.input.height as isize, g.input.width as isize);
    let (oh, ow) = (g.output.height, g.output.width);
    let n = oh * ow;
    let mut x = vec![0.0; g.input.numel()];
    for c in 0..g.cin {
        let plane = &mut x[c * (h * w) as usize..(c + 1) * (h * w) as usize];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let off = kx as isize - g.pad as isize;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + off;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices whose extents cover every (row, col)
    // addressed through the given strides; c is m x n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward_layers(
    layers: &[Layer],
    params: &[f64],
    mut x: Tensor,
    caches: Option<&mut Vec<Cache>>,
) -> Result<Tensor> {
    let mut offset = 0;
    let mut caches = caches;
    for layer in layers {
        let np = layer.param_count();
        let p = &params[offset..offset + np];
        offset += np;
        let out_shape = layer.output_shape(x.shape)?;
        let (y, cache) = forward_layer(layer, p, x, out_shape, caches.is_some())?;
        if let (Some(cs), Some(c)) = (caches.as_deref_mut(), cache) {
            cs.push(c);
        }
        x = y;
    }
    Ok(x)
}

fn forward_layer(
    layer: &Layer,
    p: &[f64],
    x: Tensor,
    out_shape: Shape,
    keep: bool,
) -> Result<(Tensor, Option<Cache>)> {
    match *layer {
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let g = ConvGeom {
                cin: in_channels,
                cout: out_channels,
                k: kernel,
                stride,
                pad: padding,
                input: x.shape,
                output: out_shape,
            };
            // Few channels: gemm packing costs more than it saves.
            let direct = in_channels * out_channels <= 64;
            if direct {
                let (weights, bias) = p.split_at(out_channels * g.cols_rows());
                let out = direct_forward(&x.data, weights, bias, &g);
                return Ok((
                    Tensor {
                        shape: out_shape,
                        data: out,
                    },
                    keep.then_some(Cache::DirectConv { input: x }),
                ));
            }
            let cols = im2col(&x.data, &g);
            let kk = g.cols_rows();
            let n = g.cols_len();
            let (weights, bias) = p.split_at(out_channels * kk);
            let mut out = Vec::with_capacity(out_channels * n);
            for &b in bias {
                out.extend(std::iter::repeat(b).take(n));
            }
            gemm(
                g.cout,
                kk,
                n,
                weights,
                kk as isize,
                1,
                &cols,
                n as isize,
                1,
                1.0,
                &mut out,
            );
            let cache = keep.then(|| Cache::Conv {
                cols,
                input: x.shape,
            });
            Ok((
                Tensor {
                    shape: out_shape,
                    data: out,
                },
                cache,
            ))
        }
        Layer::UpsampleNearest { factor } => Ok((
            Tensor {
                shape: out_shape,
                data: upsample_nearest(&x, factor),
            },
            keep.then_some(Cache::Upsample { input: x.shape }),
        )),
        Layer::InstanceNorm => {
            let s = x.shape;
            let hw = s.height * s.width;
            let mut out = x.data;
            let mut inv_stds = Vec::with_capacity(s.channels);
            for plane in out.chunks_exact_mut(hw) {
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                let inv_std = 1.0 / (var + NORM_EPS).sqrt();
                plane.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
                inv_stds.push(inv_std);
            }
            let cache = keep.then(|| Cache::Norm {
                xhat: out.clone(),
                inv_std: inv_stds,
            });
            Ok((Tensor { shape: s, data: out }, cache))
        }
        Layer::Relu => {
            let cache = keep.then(|| Cache::Relu {
                input: x.data.clone(),
            });
            let data = x.data.into_iter().map(|v| v.max(0.0)).collect();
            Ok((Tensor { shape: x.shape, data }, cache))
        }
        Layer::LeakyRelu { slope } => {
            let cache = keep.then(|| Cache::LeakyRelu {
                input: x.data.clone(),
            });
            let data = x
                .data
                .into_iter()
                .map(|v| if v > 0.0 { v } else { slope * v })
                .collect();
            Ok((Tensor { shape: x.shape, data }, cache))
        }
        Layer::Tanh => {
            let data: Vec<f64> = x.data.into_iter().map(f64::tanh).collect();
            let cache = keep.then(|| Cache::Tanh {
                output: data.clone(),
            });
            Ok((Tensor { shape: x.shape, data }, cache))
        }
        Layer::Residual { ref body } => {
            let mut inner = Vec::new();
            let skip = x.data.clone();
            let mut y = forward_layers(body, p, x, keep.then_some(&mut inner))?;
            for (a, b) in y.data.iter_mut().zip(&skip) {
                *a += b;
            }
            Ok((y, keep.then_some(Cache::Residual { caches: inner })))
        }
        Layer::UpsampleResidual { factor, ref body } => {
            let mut inner = Vec::new();
            let input = x.shape;
            let skip = upsample_nearest(&x, factor);
            let mut y = forward_layers(body, p, x, keep.then_some(&mut inner))?;
            for (a, b) in y.data.iter_mut().zip(&skip) {
                *a += b;
            }
            Ok((y, keep.then_some(Cache::UpsampleResidual { caches: inner, input })))
        }
    }
}

/// Backpropagates `grad` through `layers`, accumulating into `param_grad`.
/// Returns the input gradient when `want_input` is set.
pub(crate) fn backward_layers(
    layers: &[Layer],
    params: &[f64],
    caches: &[Cache],
    mut grad: Tensor,
    mut param_grad: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Tensor> {
    let counts: Vec<usize> = layers.iter().map(Layer::param_count).collect();
    let mut end = params.len();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let start = end - counts[idx];
        let need_in = want_input || idx > 0;
        let pg = param_grad.as_deref_mut().map(|g| &mut g[start..end]);
        let next = backward_layer(layer, &params[start..end], &caches[idx], grad, pg, need_in);
        end = start;
        match next {
            Some(g) => grad = g,
            None => return None,
        }
    }
    Some(grad)
}

fn backward_layer(
    layer: &Layer,
    p: &[f64],
    cache: &Cache,
    grad: Tensor,
    param_grad: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Tensor> {
    match (layer, cache) {
        (
            &Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            Cache::Conv { cols, input },
        ) => {
            let g = ConvGeom {
                cin: in_channels,
                cout: out_channels,
                k: kernel,
                stride,
                pad: padding,
                input: *input,
                output: grad.shape,
            };
            let kk = g.cols_rows();
            let n = g.cols_len();
            if let Some(pg) = param_grad {
                let (gw, gb) = pg.split_at_mut(out_channels * kk);
                // dW += dY . cols^T
                gemm(
                    g.cout,
                    n,
                    kk,
                    &grad.data,
                    n as isize,
                    1,
                    cols,
                    1,
                    n as isize,
                    1.0,
                    gw,
                );
                for (b, row) in gb.iter_mut().zip(grad.data.chunks_exact(n)) {
                    *b += row.iter().sum::<f64>();
                }
            }
            if !want_input {
                return None;
            }
            let weights = &p[..out_channels * kk];
            let mut dcols = vec![0.0; kk * n];
            // dcols = W^T . dY
            gemm(
                kk,
                g.cout,
                n,
                weights,
                1,
                kk as isize,
                &grad.data,
                n as isize,
                1,
                0.0,
                &mut dcols,
            );
            Some(Tensor {
                shape: *input,
                data: col2im(&dcols, &g),
            })
        }
        (
            &Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            Cache::DirectConv { input },
        ) => {
            let g = ConvGeom {
                cin: in_channels,
                cout: out_channels,
                k: kernel,
                stride,
                pad: padding,
                input: input.shape,
                output: grad.shape,
            };
            let weights = &p[..out_channels * g.cols_rows()];
            direct_backward(&input.data, weights, &grad.data, &g, param_grad, want_input).map(
                |data| Tensor {
                    shape: input.shape,
                    data,
                },
            )
        }
        (&Layer::UpsampleNearest { factor }, Cache::Upsample { input }) => {
            if !want_input {
                return None;
            }
            Some(Tensor {
                shape: *input,
                data: upsample_adjoint(&grad.data, *input, factor),
            })
        }
        (Layer::InstanceNorm, Cache::Norm { xhat, inv_std }) => {
            if !want_input {
                return None;
            }
            let hw = grad.shape.height * grad.shape.width;
            let mut out = grad.data;
            for ((dy, xh), &is) in out
                .chunks_exact_mut(hw)
                .zip(xhat.chunks_exact(hw))
                .zip(inv_std)
            {
                let mean_dy = dy.iter().sum::<f64>() / hw as f64;
                let mean_dyx = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                for (d, &x) in dy.iter_mut().zip(xh) {
                    *d = is * (*d - mean_dy - x * mean_dyx);
                }
            }
            Some(Tensor {
                shape: grad.shape,
                data: out,
            })
        }
        (Layer::Relu, Cache::Relu { input }) => {
            if !want_input {
                return None;
            }
            let data = grad
                .data
                .iter()
                .zip(input)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            Some(Tensor {
                shape: grad.shape,
                data,
            })
        }
        (&Layer::LeakyRelu { slope }, Cache::LeakyRelu { input }) => {
            if !want_input {
                return None;
            }
            let data = grad
                .data
                .iter()
                .zip(input)
                .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                .collect();
            Some(Tensor {
                shape: grad.shape,
                data,
            })
        }
        (Layer::Tanh, Cache::Tanh { output }) => {
            if !want_input {
                return None;
            }
            let data = grad
                .data
                .iter()
                .zip(output)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            Some(Tensor {
                shape: grad.shape,
                data,
            })
        }
        (Layer::Residual { body }, Cache::Residual { caches }) => {
            let skip = want_input.then(|| grad.clone());
            // the body's parameters need its full input gradient chain
            let inner = backward_layers(body, p, caches, grad, param_grad, want_input);
            match (inner, skip) {
                (Some(mut g), Some(s)) => {
                    for (a, b) in g.data.iter_mut().zip(&s.data) {
                        *a += b;
                    }
                    Some(g)
                }
                _ => None,
            }
        }
        (&Layer::UpsampleResidual { factor, ref body }, Cache::UpsampleResidual { caches, input }) => {
            let skip = want_input.then(|| upsample_adjoint(&grad.data, *input, factor));
            let inner = backward_layers(body, p, caches, grad, param_grad, want_input);
            match (inner, skip) {
                (Some(mut g), Some(s)) => {
                    for (a, b) in g.data.iter_mut().zip(&s) {
                        *a += b;
                    }
                    Some(g)
                }
                _ => None,
            }
        }
        _ => unreachable!("layer/cache mismatch"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shapes() {
        let l = Layer::conv(1, 4, 4, 2, 1);
        assert_eq!(
            l.output_shape(Shape::new(1, 256, 256)).unwrap(),
            Shape::new(4, 128, 128)
        );
        assert_eq!(l.param_count(), 4 * 16 + 4);
        assert!(l.output_shape(Shape::new(2, 8, 8)).is_err());
        let r = Layer::Residual {
            body: vec![Layer::conv(3, 3, 3, 1, 1), Layer::Relu],
        };
        assert!(r.output_shape(Shape::new(3, 5, 5)).is_ok());
        let bad = Layer::Residual {
            body: vec![Layer::conv(3, 3, 3, 1, 0)],
        };
        assert!(bad.output_shape(Shape::new(3, 5, 5)).is_err());
    }

    #[test]
    fn conv_matches_direct_loop() {
        let input = Shape::new(2, 7, 6);
        let layer = Layer::conv(2, 3, 3, 2, 1);
        let out_shape = layer.output_shape(input).unwrap();
        let x: Vec<f64> = (0..input.numel()).map(|i| ((i * 37 % 11) as f64) * 0.1 - 0.5).collect();
        let p: Vec<f64> = (0..layer.param_count()).map(|i| ((i * 17 % 7) as f64) * 0.2 - 0.6).collect();
        let (y, _) = forward_layer(&layer, &p, Tensor { shape: input, data: x.clone() }, out_shape, false).unwrap();
        let (k, stride, pad) = (3usize, 2usize, 1isize);
        for o in 0..3 {
            for oy in 0..out_shape.height {
                for ox in 0..out_shape.width {
                    let mut acc = p[3 * 2 * 9 + o];
                    for c in 0..2 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                    acc += p[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x[(c * 7 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data[(o * out_shape.height + oy) * out_shape.width + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn direct_conv_agrees_with_im2col() {
        for (cin, cout, k, st, pad, h, w) in [
            (2, 3, 3, 1, 1, 7, 6),
            (1, 2, 4, 1, 1, 9, 5),
            (3, 1, 3, 1, 0, 6, 8),
            (2, 2, 1, 1, 0, 4, 4),
            (2, 3, 3, 2, 1, 7, 6),
            (1, 2, 4, 2, 1, 9, 8),
            (2, 1, 3, 3, 0, 10, 11),
        ] {
            let layer = Layer::conv(cin, cout, k, st, pad);
            let input = Shape::new(cin, h, w);
            let out = layer.output_shape(input).unwrap();
            let x: Vec<f64> = (0..input.numel()).map(|i| ((i * 37 % 11) as f64) * 0.1 - 0.5).collect();
            let p: Vec<f64> = (0..layer.param_count()).map(|i| ((i * 17 % 7) as f64) * 0.2 - 0.6).collect();
            let dy: Vec<f64> = (0..out.numel()).map(|i| ((i * 5 % 13) as f64) * 0.07 - 0.4).collect();
            let g = ConvGeom { cin, cout, k, stride: st, pad, input, output: out };
            let cols = im2col(&x, &g);
            let n = g.cols_len();
            let mut reference = Vec::new();
            for o in 0..cout {
                for j in 0..n {
                    let mut acc = p[cout * g.cols_rows() + o];
                    for r in 0..g.cols_rows() {
                        acc += p[o * g.cols_rows() + r] * cols[r * n + j];
                    }
                    reference.push(acc);
                }
            }
            let (wts, bias) = p.split_at(cout * g.cols_rows());
            let y = direct_forward(&x, wts, bias, &g);
            for (a, b) in y.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
            let mut pg_direct = vec![0.0; p.len()];
            let dx_direct = backward_layer(&layer, &p, &Cache::DirectConv { input: Tensor { shape: input, data: x.clone() } }, Tensor { shape: out, data: dy.clone() }, Some(&mut pg_direct), true).unwrap();
            let mut pg_cols = vec![0.0; p.len()];
            let dx_cols = backward_layer(&layer, &p, &Cache::Conv { cols, input }, Tensor { shape: out, data: dy }, Some(&mut pg_cols), true).unwrap();
            for (a, b) in pg_direct.iter().zip(&pg_cols).chain(dx_direct.data.iter().zip(&dx_cols.data)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
