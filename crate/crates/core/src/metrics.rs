//! Full-reference image quality metrics: RMSE, PSNR and SSIM.
//!
//! RMSE and PSNR are reported on the 0–255 scale. SSIM uses the original
//! Gaussian-window formulation (11×11, σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic
//! range 1) over valid window positions, averaged over channels.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::filters::{gaussian_kernel, Kernel2D};
use crate::image::ImageTensor;

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn mse_255(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = 255.0 * x - 255.0 * y;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Root-mean-square error on the 0–255 scale.
pub fn rmse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(mse_255(a, b)?.sqrt())
}

/// `10·log10(255² / MSE)`; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let mse = mse_255(a, b)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    })
}

/// Weighted local statistics of one channel pair at every valid window position.
struct LocalStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn local_stats(a: &ImageTensor, b: &ImageTensor, ch: usize, win: &Kernel2D) -> LocalStats {
    let n = win.size();
    let (oh, ow) = (a.height() - n + 1, a.width() - n + 1);
    let mut s = LocalStats {
        mu_a: Vec::with_capacity(oh * ow),
        mu_b: Vec::with_capacity(oh * ow),
        var_a: Vec::with_capacity(oh * ow),
        var_b: Vec::with_capacity(oh * ow),
        cov: Vec::with_capacity(oh * ow),
    };
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..n {
                for dx in 0..n {
                    let w = win.tap(dy, dx);
                    let va = a.get(y + dy, x + dx, ch);
                    let vb = b.get(y + dy, x + dx, ch);
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            }
            s.mu_a.push(ma);
            s.mu_b.push(mb);
            s.var_a.push(saa - ma * ma);
            s.var_b.push(sbb - mb * mb);
            s.cov.push(sab - ma * mb);
        }
    }
    s
}

fn check_ssim_input(a: &ImageTensor, b: &ImageTensor, win: &Kernel2D) -> Result<()> {
    a.check_same_shape(b)?;
    if a.height() < win.size() || a.width() < win.size() {
        return Err(Error::shape(format!(
            "SSIM needs at least {0}x{0} pixels, got {1}x{2}",
            win.size(),
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Mean SSIM over valid windows, averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let win = gaussian_kernel(SSIM_SIGMA)?;
    check_ssim_input(a, b, &win)?;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let per_channel: Vec<f64> = (0..a.channels())
        .map(|ch| {
            let s = local_stats(a, b, ch, &win);
            let n = s.mu_a.len() as f64;
            (0..s.mu_a.len())
                .map(|i| {
                    let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
                    ((2.0 * ma * mb + c1) * (2.0 * s.cov[i] + c2))
                        / ((ma * ma + mb * mb + c1) * (s.var_a[i] + s.var_b[i] + c2))
                })
                .sum::<f64>()
                / n
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

/// Mean contrast-structure factor `(2σ_ab + C2) / (σ_a² + σ_b² + C2)` of SSIM,
/// the part that ignores local means.
pub fn ssim_contrast_structure(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let win = gaussian_kernel(SSIM_SIGMA)?;
    check_ssim_input(a, b, &win)?;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..a.channels() {
        let s = local_stats(a, b, ch, &win);
        let n = s.cov.len() as f64;
        total += (0..s.cov.len())
            .map(|i| (2.0 * s.cov[i] + c2) / (s.var_a[i] + s.var_b[i] + c2))
            .sum::<f64>()
            / n;
    }
    Ok(total / a.channels() as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn ser_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str(""),
    }
}

/// Metrics of one produced/reference pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    pub rmse: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    /// Reserved; never computed.
    #[serde(serialize_with = "ser_opt")]
    pub niqe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricMeans {
    pub rmse: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub label: String,
    /// Intensity scale RMSE and PSNR refer to.
    pub scale: String,
    pub count: usize,
    pub means: MetricMeans,
    pub rows: Vec<MetricRow>,
}

/// A produced image and its reference.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub produced: ImageTensor,
    pub reference: ImageTensor,
}

pub fn evaluate_pair(pair: &ImagePair) -> Result<MetricRow> {
    let tag = |e: Error| match e {
        Error::Shape(msg) => Error::Shape(format!("{}: {msg}", pair.id)),
        other => other,
    };
    Ok(MetricRow {
        id: pair.id.clone(),
        rmse: rmse(&pair.produced, &pair.reference).map_err(tag)?,
        psnr: psnr(&pair.produced, &pair.reference).map_err(tag)?,
        ssim: ssim(&pair.produced, &pair.reference).map_err(tag)?,
        niqe: None,
    })
}

/// Per-pair metrics and their arithmetic means, in input order.
pub fn evaluate(pairs: &[ImagePair], label: &str) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no image pairs to evaluate".into()));
    }
    let rows = pairs.par_iter().map(evaluate_pair).collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let means = MetricMeans {
        rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    Ok(MetricReport {
        label: label.to_string(),
        scale: "0-255".to_string(),
        count: rows.len(),
        means,
        rows,
    })
}

impl MetricReport {
    /// One row per pair: `id,rmse,psnr,ssim,niqe`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for r in &self.rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads back the `rmse`/`psnr`/`ssim` columns of a metrics CSV.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricCsvRow {
    pub id: String,
    pub rmse: f64,
    pub psnr: String,
    pub ssim: f64,
    pub niqe: String,
}
