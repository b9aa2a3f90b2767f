//! Convolution kernels for the tape: learned valid-mode convolution via
//! im2col + GEMM, reflection padding, and fixed same-size filtering.

use std::ops::Range;

use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::filters::{check_fits, correlate_reflect, correlate_reflect_adjoint, reflect101, Kernel2D};

/// `c = a·b + beta * c` for row-major `a (m×k)`, `b (k×n)`, `c (m×n)`.
/// `a_t`/`b_t` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
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

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_dims(input: Shape, kernel: Shape) -> Result<ConvDims> {
    let [_, h, w, cin] = input.0;
    let [kh, kw, kcin, cout] = kernel.0;
    if kcin != cin {
        return Err(Error::shape(format!("conv kernel {kernel} expects {kcin} input channels, got {input}")));
    }
    if h < kh || w < kw || kh == 0 || kw == 0 {
        return Err(Error::shape(format!("conv kernel {kernel} does not fit input {input}")));
    }
    Ok(ConvDims {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh: h - kh + 1,
        ow: w - kw + 1,
    })
}

/// Output rows per im2col block; bounds the patch matrix to roughly
/// `ROW_BLOCK_PIXELS × kh·kw·cin` entries.
const ROW_BLOCK_PIXELS: usize = 4096;

fn row_blocks(d: &ConvDims) -> impl Iterator<Item = Range<usize>> {
    let step = (ROW_BLOCK_PIXELS / d.ow).max(1);
    let oh = d.oh;
    (0..oh).step_by(step).map(move |r| r..(r + step).min(oh))
}

/// Unrolls output rows `rows` of one image into a `(rows·ow) × (kh·kw·cin)`
/// patch matrix.
fn im2col(x: &[f64], d: &ConvDims, rows: Range<usize>, cols: &mut [f64]) {
    let k = d.cols();
    let run = d.kw * d.cin;
    for (r, oy) in rows.enumerate() {
        for ox in 0..d.ow {
            let row = &mut cols[(r * d.ow + ox) * k..][..k];
            for ky in 0..d.kh {
                let src = ((oy + ky) * d.w + ox) * d.cin;
                row[ky * run..(ky + 1) * run].copy_from_slice(&x[src..src + run]);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix back onto the image.
fn col2im(cols: &[f64], d: &ConvDims, rows: Range<usize>, dx: &mut [f64]) {
    let k = d.cols();
    let run = d.kw * d.cin;
    for (r, oy) in rows.enumerate() {
        for ox in 0..d.ow {
            let row = &cols[(r * d.ow + ox) * k..][..k];
            for ky in 0..d.kh {
                let dst = ((oy + ky) * d.w + ox) * d.cin;
                for (o, v) in dx[dst..dst + run].iter_mut().zip(&row[ky * run..(ky + 1) * run]) {
                    *o += v;
                }
            }
        }
    }
}

/// Valid-mode correlation of a single image into `y` (`oh·ow × cout`).
fn conv_one(x: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims, y: &mut [f64]) {
    for px in y.chunks_exact_mut(d.cout) {
        px.copy_from_slice(bias);
    }
    let mut cols = Vec::new();
    for rows in row_blocks(d) {
        let m = rows.len() * d.ow;
        cols.resize(m * d.cols(), 0.0);
        let out = &mut y[rows.start * d.ow * d.cout..][..m * d.cout];
        im2col(x, d, rows, &mut cols);
        gemm(m, d.cols(), d.cout, &cols, false, kernel, false, 1.0, out);
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = conv_dims(input.shape, kernel.shape)?;
    if bias.numel() != d.cout {
        return Err(Error::shape(format!("conv bias {} does not match {} output channels", bias.shape, d.cout)));
    }
    let n = input.shape.n();
    let in_per = d.h * d.w * d.cin;
    let out_per = d.pixels() * d.cout;
    let mut out = vec![0.0; n * out_per];
    out.par_chunks_mut(out_per).enumerate().for_each(|(i, y)| {
        conv_one(&input.data[i * in_per..(i + 1) * in_per], &kernel.data, &bias.data, &d, y);
    });
    Ok(Tensor {
        shape: Shape::new(n, d.oh, d.ow, d.cout),
        data: out,
    })
}

pub(super) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    /// Kernel and bias gradients.
    pub params: Option<(Vec<f64>, Vec<f64>)>,
}

pub(super) fn conv2d_backward(
    up: &[f64],
    input: &Tensor,
    kernel: &Tensor,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let d = conv_dims(input.shape, kernel.shape).expect("checked in forward");
    let n = input.shape.n();
    let in_per = d.h * d.w * d.cin;
    let out_per = d.pixels() * d.cout;
    let ksize = d.cols() * d.cout;

    // Per-item work in parallel; parameter gradients are summed afterwards in
    // item order so the result does not depend on the thread count.
    let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input.data[i * in_per..(i + 1) * in_per];
            let dy_all = &up[i * out_per..(i + 1) * out_per];
            let mut dk = want_params.then(|| vec![0.0; ksize]);
            let mut dx = want_input.then(|| vec![0.0; in_per]);
            let mut cols = Vec::new();
            for rows in row_blocks(&d) {
                let m = rows.len() * d.ow;
                cols.resize(m * d.cols(), 0.0);
                let dy = &dy_all[rows.start * d.ow * d.cout..][..m * d.cout];
                if let Some(dk) = dk.as_mut() {
                    im2col(x, &d, rows.clone(), &mut cols);
                    gemm(d.cols(), m, d.cout, &cols, true, dy, false, 1.0, dk);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(m, d.cout, d.cols(), dy, false, &kernel.data, true, 0.0, &mut cols);
                    col2im(&cols, &d, rows, dx);
                }
            }
            (dx, dk)
        })
        .collect();

    let mut input_grad = want_input.then(|| Vec::with_capacity(n * in_per));
    let mut dk_sum = want_params.then(|| vec![0.0; ksize]);
    for (dx, dk) in per_item {
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dk)) = (dk_sum.as_mut(), dk) {
            acc.iter_mut().zip(&dk).for_each(|(a, g)| *a += g);
        }
    }
    let params = dk_sum.map(|dk| {
        let mut db = vec![0.0; d.cout];
        for px in up.chunks_exact(d.cout) {
            db.iter_mut().zip(px).for_each(|(a, g)| *a += g);
        }
        (dk, db)
    });
    ConvGrads {
        input: input_grad,
        params,
    }
}

pub(crate) fn reflect_pad_forward(x: &Tensor, pad: usize) -> Result<Tensor> {
    let [n, h, w, c] = x.shape.0;
    if pad >= h || pad >= w {
        return Err(Error::shape(format!("reflection pad {pad} too large for {}", x.shape)));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * ph * pw * c);
    for i in 0..n {
        let img = &x.data[i * h * w * c..(i + 1) * h * w * c];
        for y in 0..ph {
            let sy = reflect101(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect101(xx as isize - pad as isize, w);
                let s = (sy * w + sx) * c;
                out.extend_from_slice(&img[s..s + c]);
            }
        }
    }
    Ok(Tensor {
        shape: Shape::new(n, ph, pw, c),
        data: out,
    })
}

pub(super) fn reflect_pad_backward(up: &[f64], shape: Shape, pad: usize) -> Vec<f64> {
    let [n, h, w, c] = shape.0;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut dx = vec![0.0; shape.numel()];
    for i in 0..n {
        let base_in = i * h * w * c;
        let base_up = i * ph * pw * c;
        for y in 0..ph {
            let sy = reflect101(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect101(xx as isize - pad as isize, w);
                let s = base_in + (sy * w + sx) * c;
                let u = base_up + (y * pw + xx) * c;
                for k in 0..c {
                    dx[s + k] += up[u + k];
                }
            }
        }
    }
    dx
}

pub(super) fn fixed_conv_forward(x: &Tensor, k: &Kernel2D) -> Result<Tensor> {
    let [n, h, w, c] = x.shape.0;
    check_fits(h, w, k)?;
    let per = h * w * c;
    let mut out = vec![0.0; x.numel()];
    for i in 0..n {
        correlate_reflect(&x.data[i * per..(i + 1) * per], h, w, c, k, &mut out[i * per..(i + 1) * per]);
    }
    Ok(Tensor { shape: x.shape, data: out })
}

pub(super) fn fixed_conv_backward(up: &[f64], shape: Shape, k: &Kernel2D) -> Vec<f64> {
    let [n, h, w, c] = shape.0;
    let per = h * w * c;
    let mut dx = vec![0.0; shape.numel()];
    for i in 0..n {
        correlate_reflect_adjoint(&up[i * per..(i + 1) * per], h, w, c, k, &mut dx[i * per..(i + 1) * per]);
    }
    dx
}
