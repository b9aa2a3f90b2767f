//! Fixed spatial filtering: Gaussian and derivative-of-Gaussian kernels,
//! same-size correlation with reflect-101 borders, and gradient fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Default Gaussian scale for every "local neighbourhood" gradient.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Square kernel with odd support, taps stored row-major as `taps[dy * size + dx]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel2D {
    size: usize,
    taps: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
        }
        if taps.len() != size * size {
            return Err(Error::shape(format!(
                "kernel of size {size} needs {} taps, got {}",
                size * size,
                taps.len()
            )));
        }
        Ok(Self { size, taps })
    }

    pub fn identity(size: usize) -> Result<Self> {
        let mut taps = vec![0.0; size * size];
        taps[size * size / 2] = 1.0;
        Self::new(size, taps)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    #[inline]
    pub fn tap(&self, dy: usize, dx: usize) -> f64 {
        self.taps[dy * self.size + dx]
    }

    pub fn transposed(&self) -> Kernel2D {
        let n = self.size;
        let mut taps = vec![0.0; n * n];
        for dy in 0..n {
            for dx in 0..n {
                taps[dx * n + dy] = self.taps[dy * n + dx];
            }
        }
        Kernel2D { size: n, taps }
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }
}

fn radius_for(sigma: f64) -> Result<usize> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok((3.0 * sigma).ceil() as usize)
}

/// Normalized 2D Gaussian of size `2·ceil(3σ)+1`.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel2D> {
    let r = radius_for(sigma)? as isize;
    let n = (2 * r + 1) as usize;
    let mut taps = Vec::with_capacity(n * n);
    for v in -r..=r {
        for u in -r..=r {
            taps.push((-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Kernel2D::new(n, taps)
}

/// Derivative-of-Gaussian kernels `(d/dx, d/dy)`.
///
/// The x-kernel is proportional to `x·G(x, y)` (correlation convention, so
/// positive slopes give positive responses) and scaled so its response to the
/// ramp `f(x, y) = x` is exactly 1. The y-kernel is its transpose.
pub fn gaussian_derivative_kernels(sigma: f64) -> Result<(Kernel2D, Kernel2D)> {
    let r = radius_for(sigma)? as isize;
    let n = (2 * r + 1) as usize;
    let mut taps = Vec::with_capacity(n * n);
    for v in -r..=r {
        for u in -r..=r {
            let g = (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp();
            taps.push(u as f64 * g);
        }
    }
    let mut ramp_response = 0.0;
    for (i, t) in taps.iter().enumerate() {
        let u = (i % n) as isize - r;
        ramp_response += t * u as f64;
    }
    taps.iter_mut().for_each(|t| *t /= ramp_response);
    let kx = Kernel2D::new(n, taps)?;
    let ky = kx.transposed();
    Ok((kx, ky))
}

/// Border handling for [`convolve2d`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Border {
    /// Mirror without repeating the edge sample: `-1 → 1`, `n → n-2`.
    #[default]
    Reflect101,
}

/// Reflect-101 index mapping. Valid for offsets up to `n - 1` past either edge.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&j));
    j as usize
}

/// Same-size correlation of every channel with `k` (no kernel flip).
pub fn convolve2d(map: &ImageTensor, k: &Kernel2D, border: Border) -> Result<ImageTensor> {
    let Border::Reflect101 = border;
    let (h, w, ch) = map.dims();
    check_fits(h, w, k)?;
    let mut out = ImageTensor::zeros(h, w, ch);
    correlate_reflect(map.data(), h, w, ch, k, out.data_mut());
    Ok(out)
}

pub(crate) fn check_fits(h: usize, w: usize, k: &Kernel2D) -> Result<()> {
    if h < k.size() || w < k.size() {
        return Err(Error::shape(format!(
            "kernel {0}x{0} larger than image {h}x{w}",
            k.size()
        )));
    }
    Ok(())
}

/// Accumulates the reflect-101 correlation of an interleaved `h × w × ch`
/// plane into `dst`.
pub(crate) fn correlate_reflect(src: &[f64], h: usize, w: usize, ch: usize, k: &Kernel2D, dst: &mut [f64]) {
    let r = k.radius() as isize;
    let n = k.size();
    for y in 0..h {
        for dy in 0..n {
            let sy = reflect101(y as isize + dy as isize - r, h);
            for dx in 0..n {
                let t = k.tap(dy, dx);
                if t == 0.0 {
                    continue;
                }
                for x in 0..w {
                    let sx = reflect101(x as isize + dx as isize - r, w);
                    let s = (sy * w + sx) * ch;
                    let d = (y * w + x) * ch;
                    for c in 0..ch {
                        dst[d + c] += t * src[s + c];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`correlate_reflect`]: scatters `upstream` back onto the source grid.
pub(crate) fn correlate_reflect_adjoint(
    upstream: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    k: &Kernel2D,
    dsrc: &mut [f64],
) {
    let r = k.radius() as isize;
    let n = k.size();
    for y in 0..h {
        for dy in 0..n {
            let sy = reflect101(y as isize + dy as isize - r, h);
            for dx in 0..n {
                let t = k.tap(dy, dx);
                if t == 0.0 {
                    continue;
                }
                for x in 0..w {
                    let sx = reflect101(x as isize + dx as isize - r, w);
                    let s = (sy * w + sx) * ch;
                    let d = (y * w + x) * ch;
                    for c in 0..ch {
                        dsrc[s + c] += t * upstream[d + c];
                    }
                }
            }
        }
    }
}

/// Directional derivatives and per-channel magnitude of a map.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub gx: ImageTensor,
    pub gy: ImageTensor,
    pub magnitude: ImageTensor,
}

pub fn spatial_gradient(map: &ImageTensor, sigma: f64) -> Result<GradientField> {
    let (kx, ky) = gaussian_derivative_kernels(sigma)?;
    let gx = convolve2d(map, &kx, Border::Reflect101)?;
    let gy = convolve2d(map, &ky, Border::Reflect101)?;
    let magnitude = gx.zip_map(&gy, f64::hypot)?;
    Ok(GradientField { gx, gy, magnitude })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    /// Independent nested-loop oracle with explicit mirror arithmetic.
    fn brute_force(map: &ImageTensor, k: &Kernel2D) -> ImageTensor {
        let (h, w, ch) = map.dims();
        let r = k.radius() as i64;
        let mirror = |i: i64, n: i64| {
            if i < 0 {
                -i
            } else if i > n - 1 {
                2 * n - 2 - i
            } else {
                i
            }
        };
        ImageTensor::from_fn(h, w, ch, |y, x, c| {
            let mut acc = 0.0;
            for i in 0..k.size() {
                for j in 0..k.size() {
                    let sy = mirror(y as i64 + i as i64 - r, h as i64) as usize;
                    let sx = mirror(x as i64 + j as i64 - r, w as i64) as usize;
                    acc += k.tap(i, j) * map.get(sy, sx, c);
                }
            }
            acc
        })
    }

    #[test]
    fn kernel_sums() {
        for sigma in [0.5, 1.0, 1.5, 2.0] {
            let g = gaussian_kernel(sigma).unwrap();
            assert!((g.sum() - 1.0).abs() < 1e-12);
            let (kx, ky) = gaussian_derivative_kernels(sigma).unwrap();
            assert!(kx.sum().abs() < 1e-12);
            assert!(ky.sum().abs() < 1e-12);
            assert_eq!(kx.size(), 2 * (3.0 * sigma).ceil() as usize + 1);
        }
        let (kx, _) = gaussian_derivative_kernels(1.0).unwrap();
        assert_eq!(kx.size(), 7);
        assert_eq!(gaussian_kernel(1.5).unwrap().size(), 11);
        assert!(gaussian_derivative_kernels(0.0).is_err());
        assert!(gaussian_derivative_kernels(-1.0).is_err());
        assert!(Kernel2D::new(4, vec![0.0; 16]).is_err());
    }

    #[test]
    fn ramp_responses() {
        let (kx, ky) = gaussian_derivative_kernels(1.0).unwrap();
        let fx = ImageTensor::from_fn(20, 20, 1, |_, c, _| c as f64);
        let fy = ImageTensor::from_fn(20, 20, 1, |r, _, _| r as f64);
        let gxx = convolve2d(&fx, &kx, Border::Reflect101).unwrap();
        let gxy = convolve2d(&fy, &kx, Border::Reflect101).unwrap();
        let gyy = convolve2d(&fy, &ky, Border::Reflect101).unwrap();
        for y in 3..17 {
            for x in 3..17 {
                assert!((gxx.get(y, x, 0) - 1.0).abs() < 1e-10);
                assert!(gxy.get(y, x, 0).abs() < 1e-10);
                assert!((gyy.get(y, x, 0) - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_and_box() {
        let img = random_image(6, 7, 3, 1);
        let id = Kernel2D::identity(3).unwrap();
        assert_eq!(convolve2d(&img, &id, Border::Reflect101).unwrap(), img);
        let bx = Kernel2D::new(3, vec![1.0 / 9.0; 9]).unwrap();
        let ones = ImageTensor::filled(5, 5, 1, 1.0);
        let out = convolve2d(&ones, &bx, Border::Reflect101).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn kernel_larger_than_image_rejected() {
        let (kx, _) = gaussian_derivative_kernels(1.0).unwrap();
        assert!(convolve2d(&ImageTensor::zeros(6, 10, 1), &kx, Border::Reflect101).is_err());
    }

    #[test]
    fn constant_and_ramp_gradients() {
        let c = ImageTensor::filled(12, 12, 3, 0.37);
        let g = spatial_gradient(&c, 1.0).unwrap();
        for f in [&g.gx, &g.gy, &g.magnitude] {
            assert!(f.data().iter().all(|v| v.abs() < 1e-15));
        }
        let ramp = ImageTensor::from_fn(16, 16, 1, |_, x, _| 2.0 * x as f64);
        let g = spatial_gradient(&ramp, 1.0).unwrap();
        for y in 3..13 {
            for x in 3..13 {
                assert!((g.gx.get(y, x, 0) - 2.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rotation_equivariance() {
        use crate::image::Augment;
        let img = random_image(11, 11, 1, 5);
        let rot = img.augmented(Augment::Rot90).unwrap();
        let g = spatial_gradient(&img, 1.0).unwrap();
        let gr = spatial_gradient(&rot, 1.0).unwrap();
        let n = 11;
        for r in 0..n {
            for c in 0..n {
                // rot90 (ccw): new(r, c) = old(c, n-1-r)
                let (sr, sc) = (c, n - 1 - r);
                assert!((gr.gx.get(r, c, 0) - g.gy.get(sr, sc, 0)).abs() < 1e-12);
                assert!((gr.gy.get(r, c, 0) + g.gx.get(sr, sc, 0)).abs() < 1e-12);
                assert!((gr.magnitude.get(r, c, 0) - g.magnitude.get(sr, sc, 0)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in 0u64..500, h in 3usize..9, w in 3usize..9, ks in 0usize..2) {
            let size = [1, 3][ks];
            let img = random_image(h, w, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let k = Kernel2D::new(size, (0..size * size).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
            let a = convolve2d(&img, &k, Border::Reflect101).unwrap();
            let b = brute_force(&img, &k);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn linear(seed in 0u64..200, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_image(8, 8, 1, seed);
            let y = random_image(8, 8, 1, seed + 1000);
            let (kx, _) = gaussian_derivative_kernels(1.0).unwrap();
            let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let lhs = convolve2d(&combo, &kx, Border::Reflect101).unwrap();
            let cx = convolve2d(&x, &kx, Border::Reflect101).unwrap();
            let cy = convolve2d(&y, &kx, Border::Reflect101).unwrap();
            for i in 0..64 {
                prop_assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn magnitude_offset_invariant(seed in 0u64..200, off in -5.0f64..5.0) {
            let x = random_image(9, 9, 3, seed);
            let g0 = spatial_gradient(&x, 1.0).unwrap();
            let g1 = spatial_gradient(&x.map(|v| v + off), 1.0).unwrap();
            for (p, q) in g0.magnitude.data().iter().zip(g1.magnitude.data()) {
                prop_assert!(*p >= 0.0);
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
