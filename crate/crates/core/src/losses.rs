//! The five unsupervised loss terms and their weighted sum.
//!
//! Every term is an L1 norm taken as a per-element mean. Feature maps of the
//! input image (`f_rrg`, `f'_SG`, `f_ram`) are precomputed as constants, so
//! gradients flow only into the predicted reflectance `R` and shading `S`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};
use crate::filters::gaussian_derivative_kernels;
use crate::image::ImageTensor;
use crate::physmaps::{f_ram, f_rrg, f_sg, sg_reduce, FeatureParams, RRG_PAIRS};

/// Sharpness of the edge-aware shading smoothness weight `exp(−k · f_rrg)`.
pub const SMOOTHNESS_SHARPNESS: f64 = 10.0;

/// Term weights `α1..α5` for recon, ss, rrg, sg and ram.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub ss: f64,
    pub rrg: f64,
    pub sg: f64,
    pub ram: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            ss: 0.01,
            rrg: 0.01,
            sg: 0.0001,
            ram: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.recon, self.ss, self.rrg, self.sg, self.ram]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Values of the five terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub ss: f64,
    pub rrg: f64,
    pub sg: f64,
    pub ram: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown from the five terms, computing the weighted total.
    pub fn from_terms(terms: [f64; 5], w: &LossWeights) -> Self {
        let total = terms.iter().zip(w.as_array()).map(|(t, a)| t * a).sum();
        let [recon, ss, rrg, sg, ram] = terms;
        Self {
            recon,
            ss,
            rrg,
            sg,
            ram,
            total,
        }
    }

    pub fn terms(&self) -> [f64; 5] {
        [self.recon, self.ss, self.rrg, self.sg, self.ram]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Constant feature maps of an input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct InputFeatures {
    /// `f_rrg(I)`, `(N, H, W, 3)`.
    pub rrg: Tensor,
    /// `exp(−10 · channel-mean f_rrg(I))`, `(N, H, W, 1)`.
    pub smooth_weight: Tensor,
    /// `f'_SG(I)` x and y components, `(N, H, W, 1)` each.
    pub sg_x: Tensor,
    pub sg_y: Tensor,
    /// `f_ram(I)`, `(N, H, W, 3)`.
    pub ram: Tensor,
}

fn stack(items: Vec<ImageTensor>) -> Result<Tensor> {
    Tensor::from_images(&items.iter().collect::<Vec<_>>())
}

impl InputFeatures {
    /// Computes features for every image of an `(N, H, W, 3)` batch.
    pub fn compute(images: &Tensor, params: &FeatureParams) -> Result<Self> {
        if images.shape().c() != 3 {
            return Err(Error::shape(format!("features need RGB input, got {}", images.shape())));
        }
        let (mut rrg, mut weight, mut sx, mut sy, mut ram) = (vec![], vec![], vec![], vec![], vec![]);
        for img in images.to_images()? {
            let r = f_rrg(&img, params.sigma, params.eps)?.0;
            let reduced = sg_reduce(&f_sg(&img, params.sigma, params.eps, params.sg_threshold)?);
            let w: Vec<f64> = r
                .data()
                .chunks_exact(3)
                .map(|p| (-SMOOTHNESS_SHARPNESS * (p[0] + p[1] + p[2]) / 3.0).exp())
                .collect();
            weight.push(ImageTensor::new(img.height(), img.width(), 1, w)?);
            rrg.push(r);
            sx.push(reduced.x);
            sy.push(reduced.y);
            ram.push(f_ram(&img, params.eps)?.0);
        }
        Ok(Self {
            rrg: stack(rrg)?,
            smooth_weight: stack(weight)?,
            sg_x: stack(sx)?,
            sg_y: stack(sy)?,
            ram: stack(ram)?,
        })
    }

    pub fn shape(&self) -> Shape {
        self.rrg.shape()
    }
}

fn expect_shape(g: &Graph, x: NodeId, want: Shape, what: &str) -> Result<()> {
    if g.shape(x) != want {
        return Err(Error::shape(format!("{what} has shape {}, expected {want}", g.shape(x))));
    }
    Ok(())
}

fn check_rs(g: &Graph, r: Option<NodeId>, s: Option<NodeId>, feats: &InputFeatures) -> Result<()> {
    let shape = feats.shape();
    if let Some(r) = r {
        expect_shape(g, r, shape, "reflectance")?;
    }
    if let Some(s) = s {
        expect_shape(g, s, shape.with_channels(1), "shading")?;
    }
    Ok(())
}

/// `mean |a − b|`.
fn mean_abs_diff(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let m = g.abs(d);
    Ok(g.mean(m))
}

/// `mean |R ⊙ S − I|`, with `S` broadcast over channels.
pub fn l_recon(g: &mut Graph, r: NodeId, s: NodeId, i: NodeId) -> Result<NodeId> {
    let shape = g.shape(i);
    expect_shape(g, r, shape, "reflectance")?;
    expect_shape(g, s, shape.with_channels(1), "shading")?;
    let rs = g.mul(r, s)?;
    mean_abs_diff(g, rs, i)
}

/// `mean (|∇S| · exp(−10 · f_rrg(I)))`, `|∇S|` the derivative-of-Gaussian
/// gradient magnitude.
pub fn l_ss(g: &mut Graph, s: NodeId, feats: &InputFeatures, params: &FeatureParams) -> Result<NodeId> {
    check_rs(g, None, Some(s), feats)?;
    let (kx, ky) = gaussian_derivative_kernels(params.sigma)?;
    let gx = g.fixed_conv2d(s, &kx)?;
    let gy = g.fixed_conv2d(s, &ky)?;
    let mag = g.hypot(gx, gy)?;
    let w = g.constant(feats.smooth_weight.clone());
    let weighted = g.mul(mag, w)?;
    let a = g.abs(weighted);
    Ok(g.mean(a))
}

/// `f_rrg` recorded on the graph so gradients reach `x`.
pub fn f_rrg_graph(g: &mut Graph, x: NodeId, params: &FeatureParams) -> Result<NodeId> {
    let (kx, ky) = gaussian_derivative_kernels(params.sigma)?;
    let ln = g.log_clamped(x, params.eps)?;
    let mut planes = Vec::with_capacity(3);
    for (a, b) in RRG_PAIRS {
        let la = g.select_channel(ln, a)?;
        let lb = g.select_channel(ln, b)?;
        planes.push(g.sub(la, lb)?);
    }
    let j = g.concat(&planes)?;
    let gx = g.fixed_conv2d(j, &kx)?;
    let gy = g.fixed_conv2d(j, &ky)?;
    g.hypot(gx, gy)
}

/// `mean |f_rrg(R) − f_rrg(I)|`.
pub fn l_rrg(g: &mut Graph, r: NodeId, feats: &InputFeatures, params: &FeatureParams) -> Result<NodeId> {
    check_rs(g, Some(r), None, feats)?;
    let fr = f_rrg_graph(g, r, params)?;
    let fi = g.constant(feats.rrg.clone());
    mean_abs_diff(g, fr, fi)
}

/// Sum over x and y of `mean |(∇ln S − f'_SG(I)) ⊙ f'_SG(I)|`.
pub fn l_sg(g: &mut Graph, s: NodeId, feats: &InputFeatures, params: &FeatureParams) -> Result<NodeId> {
    check_rs(g, None, Some(s), feats)?;
    let (kx, ky) = gaussian_derivative_kernels(params.sigma)?;
    let ln = g.log_clamped(s, params.eps)?;
    let mut parts = Vec::with_capacity(2);
    for (k, f) in [(&kx, &feats.sg_x), (&ky, &feats.sg_y)] {
        let d = g.fixed_conv2d(ln, k)?;
        let fc = g.constant(f.clone());
        let res = g.sub(d, fc)?;
        let masked = g.mul(res, fc)?;
        let a = g.abs(masked);
        parts.push(g.mean(a));
    }
    g.add(parts[0], parts[1])
}

/// `mean |(R − f_ram(I)) ⊙ f_ram(I)|`.
pub fn l_ram(g: &mut Graph, r: NodeId, feats: &InputFeatures) -> Result<NodeId> {
    check_rs(g, Some(r), None, feats)?;
    let m = g.constant(feats.ram.clone());
    let d = g.sub(r, m)?;
    let masked = g.mul(d, m)?;
    let a = g.abs(masked);
    Ok(g.mean(a))
}

/// Graph handles of every term and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub recon: NodeId,
    pub ss: NodeId,
    pub rrg: NodeId,
    pub sg: NodeId,
    pub ram: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> LossBreakdown {
        let v = |n: NodeId| g.value(n).item();
        let mut b = LossBreakdown::from_terms([v(self.recon), v(self.ss), v(self.rrg), v(self.sg), v(self.ram)], w);
        b.total = v(self.total);
        b
    }
}

/// Records all five terms and `Σ α_k · term_k`.
pub fn total_loss(
    g: &mut Graph,
    r: NodeId,
    s: NodeId,
    i: NodeId,
    feats: &InputFeatures,
    w: &LossWeights,
    params: &FeatureParams,
) -> Result<LossNodes> {
    w.validate()?;
    expect_shape(g, i, feats.shape(), "input")?;
    let recon = l_recon(g, r, s, i)?;
    let ss = l_ss(g, s, feats, params)?;
    let rrg = l_rrg(g, r, feats, params)?;
    let sg = l_sg(g, s, feats, params)?;
    let ram = l_ram(g, r, feats)?;
    let mut total = g.scale(recon, w.recon);
    for (term, a) in [(ss, w.ss), (rrg, w.rrg), (sg, w.sg), (ram, w.ram)] {
        let t = g.scale(term, a);
        total = g.add(total, t)?;
    }
    Ok(LossNodes {
        recon,
        ss,
        rrg,
        sg,
        ram,
        total,
    })
}

/// Evaluates all terms on plain tensors, without keeping a graph.
pub fn evaluate_losses(
    r: &Tensor,
    s: &Tensor,
    i: &Tensor,
    w: &LossWeights,
    params: &FeatureParams,
) -> Result<LossBreakdown> {
    let feats = InputFeatures::compute(i, params)?;
    let mut g = Graph::new();
    let (rn, sn, inode) = (g.constant(r.clone()), g.constant(s.clone()), g.constant(i.clone()));
    let nodes = total_loss(&mut g, rn, sn, inode, &feats, w, params)?;
    Ok(nodes.breakdown(&g, w))
}
