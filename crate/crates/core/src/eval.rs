//! Volume-level quality report: the super-resolved volume and, when the
//! clinical input is supplied, bicubic and nearest-neighbour baselines, each
//! scored slice by slice against the true high-resolution volume.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::data::RealVolume;
use crate::error::{Error, Result};
use crate::grid::{avg_pool_f, bicubic_upsample, mse, nn_upsample_g, Grid2D, ScaleFactor};
use crate::model::PatchMap;
use crate::phantom::TestPair;
use crate::quality::{psnr, ssim, Psnr, SsimParams};

/// Intensity span of normalized volumes.
pub const DYNAMIC_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    Bicubic,
    Nearest,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Proposed => "proposed",
            Method::Bicubic => "bicubic",
            Method::Nearest => "nearest",
        })
    }
}

fn psnr_text(p: &Psnr) -> String {
    match p {
        Psnr::Identical => "identical".into(),
        Psnr::Db(v) => format!("{v}"),
    }
}

fn ser_psnr<S: Serializer>(p: &Psnr, s: S) -> std::result::Result<S::Ok, S::Error> {
    match p {
        Psnr::Identical => s.serialize_str("identical"),
        Psnr::Db(v) => s.serialize_f64(*v),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SliceMetrics {
    pub slice: usize,
    pub method: Method,
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: Psnr,
    pub ssim: f64,
    pub mse: f64,
}

/// Aggregate PSNR is taken from the mean MSE; SSIM and MSE are slice means.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateMetrics {
    pub method: Method,
    pub slices: usize,
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: Psnr,
    pub ssim: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_slice: Vec<SliceMetrics>,
    pub aggregate: Vec<AggregateMetrics>,
}

fn score(slice: usize, method: Method, pred: &Grid2D, truth: &Grid2D) -> Result<SliceMetrics> {
    Ok(SliceMetrics {
        slice,
        method,
        psnr: psnr(pred, truth, DYNAMIC_RANGE)?,
        ssim: ssim(pred, truth, &SsimParams::normalized())?,
        mse: mse(pred, truth)?,
    })
}

/// Scores `pred` against `truth`. With `lr`, whose in-plane dims must be the
/// truth dims divided by the scale, the two interpolation baselines are
/// scored too. Rows are sorted by slice, then method.
pub fn eval_report(pred: &RealVolume, truth: &RealVolume, lr: Option<&RealVolume>) -> Result<EvalReport> {
    if pred.dims != truth.dims {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims, truth.dims
        )));
    }
    if let Some(lr) = lr {
        let s = ScaleFactor::SR.get();
        if lr.dims[0] != truth.dims[0] || lr.dims[1] * s != truth.dims[1] || lr.dims[2] * s != truth.dims[2] {
            return Err(Error::DimensionMismatch(format!(
                "low-resolution {:?} does not upsample by {s} to truth {:?}",
                lr.dims, truth.dims
            )));
        }
    }
    let mut per_slice = Vec::new();
    for k in 0..truth.n_slices() {
        let t = truth.slice(k)?;
        per_slice.push(score(k, Method::Proposed, &pred.slice(k)?, &t)?);
        if let Some(lr) = lr {
            let a = lr.slice(k)?;
            per_slice.push(score(k, Method::Bicubic, &bicubic_upsample(&a, ScaleFactor::SR), &t)?);
            per_slice.push(score(k, Method::Nearest, &nn_upsample_g(&a, ScaleFactor::SR), &t)?);
        }
    }
    per_slice.sort_by_key(|r| (r.slice, r.method));
    let mut methods: Vec<Method> = per_slice.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let aggregate = methods
        .into_iter()
        .map(|m| {
            let rows: Vec<&SliceMetrics> = per_slice.iter().filter(|r| r.method == m).collect();
            let n = rows.len() as f64;
            let mse = rows.iter().map(|r| r.mse).sum::<f64>() / n;
            AggregateMetrics {
                method: m,
                slices: rows.len(),
                psnr: if mse == 0.0 {
                    Psnr::Identical
                } else {
                    Psnr::Db(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
                },
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
                mse,
            }
        })
        .collect();
    Ok(EvalReport { per_slice, aggregate })
}

impl EvalReport {
    /// One row per slice and method, followed by one `all` row per method.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["slice", "method", "psnr_db", "ssim", "mse"]).map_err(csv_err)?;
        for r in &self.per_slice {
            w.write_record([
                r.slice.to_string(),
                r.method.to_string(),
                psnr_text(&r.psnr),
                format!("{:?}", r.ssim),
                format!("{:?}", r.mse),
            ])
            .map_err(csv_err)?;
        }
        for a in &self.aggregate {
            w.write_record([
                "all".to_string(),
                a.method.to_string(),
                psnr_text(&a.psnr),
                format!("{:?}", a.ssim),
                format!("{:?}", a.mse),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn aggregate_for(&self, m: Method) -> Option<&AggregateMetrics> {
        self.aggregate.iter().find(|a| a.method == m)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }
}

/// Mean scores of a generator over aligned held-out pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairScores {
    pub pairs: usize,
    /// Mean of `mse(lr, avg_pool_f(G1(lr)))`.
    pub downsample_mse: f64,
    pub psnr_generator: f64,
    pub psnr_nearest: f64,
    pub psnr_bicubic: f64,
}

/// Scores `g1` on test pairs. PSNR values are per-pair means in dB.
pub fn score_pairs(g1: &impl PatchMap, pairs: &[TestPair]) -> Result<PairScores> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no test pairs to score".into()));
    }
    let mut acc = [0.0; 4];
    for p in pairs {
        let y = g1.map_patch(&p.lr)?;
        acc[0] += mse(&p.lr, &avg_pool_f(&y, ScaleFactor::SR)?)?;
        acc[1] += psnr(&y, &p.hr, DYNAMIC_RANGE)?.db();
        acc[2] += psnr(&nn_upsample_g(&p.lr, ScaleFactor::SR), &p.hr, DYNAMIC_RANGE)?.db();
        acc[3] += psnr(&bicubic_upsample(&p.lr, ScaleFactor::SR), &p.hr, DYNAMIC_RANGE)?.db();
    }
    let n = pairs.len() as f64;
    Ok(PairScores {
        pairs: pairs.len(),
        downsample_mse: acc[0] / n,
        psnr_generator: acc[1] / n,
        psnr_nearest: acc[2] / n,
        psnr_bicubic: acc[3] / n,
    })
}
