//! Physics-derived feature maps computed from a single RGB image.
//!
//! Under a single-light diffuse image model every channel factors as
//! `I_c = r_c · S`, so per-pixel channel ratios cancel the shading. That gives
//! three maps:
//!
//! * **RRG**: gradient magnitude of the log channel ratios `ln(I_R/I_G)`,
//!   `ln(I_R/I_B)`, `ln(I_B/I_G)`. Large only at reflectance edges.
//! * **RAM**: per-channel average of the log ratios clipped to `[0, 1]`, a
//!   likelihood that the channel dominates the albedo. Zero for grey pixels.
//! * **SG**: signed gradients of `ln I_c`, kept only where the channel's
//!   averaged RRG (`M_RRG`) is below a threshold, i.e. where reflectance is
//!   locally constant and the log gradient is pure shading.
//!
//! Every log is taken after clamping intensities to `[eps, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{spatial_gradient, DEFAULT_SIGMA};
use crate::image::ImageTensor;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_SG_THRESHOLD: f64 = 0.1;

pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;

/// Channel pairs `(a, b)` of the three RRG planes, in output order.
pub const RRG_PAIRS: [(usize, usize); 3] = [(RED, GREEN), (RED, BLUE), (BLUE, GREEN)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub sigma: f64,
    pub eps: f64,
    pub sg_threshold: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            eps: DEFAULT_EPS,
            sg_threshold: DEFAULT_SG_THRESHOLD,
        }
    }
}

/// Three-plane RRG: `|∇J(R,G)|`, `|∇J(R,B)|`, `|∇J(B,G)|`.
#[derive(Clone, Debug, PartialEq)]
pub struct RrgMap(pub ImageTensor);

/// Three-plane RAM `(m_R, m_G, m_B)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RamMap(pub ImageTensor);

/// Masked shading gradients plus the `M_RRG` validity map they were masked with.
#[derive(Clone, Debug, PartialEq)]
pub struct SgMap {
    pub gx: ImageTensor,
    pub gy: ImageTensor,
    pub mask: ImageTensor,
}

/// Channel-product reduction of an [`SgMap`], one plane per direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedSg {
    pub x: ImageTensor,
    pub y: ImageTensor,
}

fn require_rgb(img: &ImageTensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::shape(format!(
            "expected a 3-channel image, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("eps must be in (0, 1), got {eps}")));
    }
    Ok(())
}

#[inline]
pub fn clamped_ln(v: f64, eps: f64) -> f64 {
    v.clamp(eps, 1.0).ln()
}

/// `ln(I_a) − ln(I_b)` per pixel, intensities clamped to `[eps, 1]`.
pub fn log_ratio(img: &ImageTensor, a: usize, b: usize, eps: f64) -> Result<ImageTensor> {
    require_rgb(img)?;
    check_eps(eps)?;
    if a > 2 || b > 2 {
        return Err(Error::invalid(format!("channel index out of range: ({a}, {b})")));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| clamped_ln(p[a], eps) - clamped_ln(p[b], eps))
        .collect();
    ImageTensor::new(img.height(), img.width(), 1, data)
}

/// Log-ratio planes in [`RRG_PAIRS`] order, as one 3-channel image.
pub fn log_ratio_planes(img: &ImageTensor, eps: f64) -> Result<ImageTensor> {
    let planes = RRG_PAIRS
        .iter()
        .map(|&(a, b)| log_ratio(img, a, b, eps))
        .collect::<Result<Vec<_>>>()?;
    ImageTensor::from_planes(&planes.iter().collect::<Vec<_>>())
}

pub fn f_rrg(img: &ImageTensor, sigma: f64, eps: f64) -> Result<RrgMap> {
    let ratios = log_ratio_planes(img, eps)?;
    Ok(RrgMap(spatial_gradient(&ratios, sigma)?.magnitude))
}

pub fn f_ram(img: &ImageTensor, eps: f64) -> Result<RamMap> {
    require_rgb(img)?;
    check_eps(eps)?;
    let mut out = Vec::with_capacity(img.data().len());
    for p in img.data().chunks_exact(3) {
        let l = [clamped_ln(p[0], eps), clamped_ln(p[1], eps), clamped_ln(p[2], eps)];
        let jbar = |a: usize, b: usize| (l[a] - l[b]).clamp(0.0, 1.0);
        out.push((jbar(RED, GREEN) + jbar(RED, BLUE)) / 2.0);
        out.push((jbar(GREEN, RED) + jbar(GREEN, BLUE)) / 2.0);
        out.push((jbar(BLUE, GREEN) + jbar(BLUE, RED)) / 2.0);
    }
    Ok(RamMap(ImageTensor::new(img.height(), img.width(), 3, out)?))
}

/// Per-channel average of the two RRG magnitudes that involve the channel.
///
/// `|∇J(a,b)| = |∇J(b,a)|`, so the G and B rows reuse the stored planes.
pub fn m_rrg_from(rrg: &RrgMap) -> ImageTensor {
    let src = &rrg.0;
    let mut out = ImageTensor::zeros(src.height(), src.width(), 3);
    for (o, p) in out.data_mut().chunks_exact_mut(3).zip(src.data().chunks_exact(3)) {
        let (rg, rb, bg) = (p[0], p[1], p[2]);
        o[RED] = (rg + rb) / 2.0;
        o[GREEN] = (bg + rg) / 2.0;
        o[BLUE] = (bg + rb) / 2.0;
    }
    out
}

pub fn m_rrg(img: &ImageTensor, sigma: f64, eps: f64) -> Result<ImageTensor> {
    Ok(m_rrg_from(&f_rrg(img, sigma, eps)?))
}

pub fn f_sg(img: &ImageTensor, sigma: f64, eps: f64, threshold: f64) -> Result<SgMap> {
    require_rgb(img)?;
    check_eps(eps)?;
    let mask = m_rrg(img, sigma, eps)?;
    let log_img = img.map(|v| clamped_ln(v, eps));
    let grad = spatial_gradient(&log_img, sigma)?;
    let keep = |g: &ImageTensor| {
        g.zip_map(&mask, |v, m| if m < threshold { v } else { 0.0 })
    };
    Ok(SgMap {
        gx: keep(&grad.gx)?,
        gy: keep(&grad.gy)?,
        mask,
    })
}

fn channel_product(img: &ImageTensor) -> ImageTensor {
    let data = img
        .data()
        .chunks_exact(img.channels())
        .map(|p| p.iter().product())
        .collect();
    ImageTensor::new(img.height(), img.width(), 1, data).expect("single-channel shape")
}

/// `f'_SG`: multiplies the three channels of each gradient component.
pub fn sg_reduce(sg: &SgMap) -> ReducedSg {
    ReducedSg {
        x: channel_product(&sg.gx),
        y: channel_product(&sg.gy),
    }
}

/// All maps for one image, computed with shared parameters.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub rrg: RrgMap,
    pub ram: RamMap,
    pub m_rrg: ImageTensor,
    pub sg: SgMap,
}

pub fn featurize(img: &ImageTensor, params: &FeatureParams) -> Result<FeatureSet> {
    let rrg = f_rrg(img, params.sigma, params.eps)?;
    let m = m_rrg_from(&rrg);
    Ok(FeatureSet {
        ram: f_ram(img, params.eps)?,
        sg: f_sg(img, params.sigma, params.eps, params.sg_threshold)?,
        m_rrg: m,
        rrg,
    })
}
