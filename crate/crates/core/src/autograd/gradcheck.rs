//! Central finite-difference verification of analytic gradients.

use super::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// A coordinate is treated as a kink when its one-sided slopes differ by
    /// more than `kink_tol * max(|fwd|, |bwd|) + abs_floor`.
    pub kink_tol: f64,
    /// Checks at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            kink_tol: 1e-2,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates excluded as non-smooth.
    pub skipped_nonsmooth: usize,
    pub passed: bool,
}

impl GradCheckReport {
    fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped_nonsmooth += other.skipped_nonsmooth;
        self.passed &= other.passed;
    }
}

/// Relative error with a floor on the denominator.
pub(crate) fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn coordinates(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n && m > 0 => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares backprop gradients of `loss` w.r.t. the tracked leaves `wrt`
/// against central differences. Leaf gradients are reset; leaf values are
/// restored before returning.
pub fn grad_check(g: &mut Graph, loss: NodeId, wrt: &[NodeId], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {}", opts.h)));
    }
    g.zero_grad();
    g.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_nonsmooth: 0,
        passed: true,
    };
    for &leaf in wrt {
        let analytic = g
            .grad(leaf)
            .ok_or_else(|| Error::invalid("grad_check target is not a tracked leaf"))?;
        let original = g.value(leaf).clone();
        let f0 = g.value(loss).item();
        let eval_at = |g: &mut Graph, i: usize, delta: f64| -> Result<f64> {
            let mut v = original.clone();
            v.data_mut()[i] += delta;
            g.set_leaf_value(leaf, v)?;
            g.recompute_from(leaf)?;
            Ok(g.value(loss).item())
        };
        for i in coordinates(original.numel(), opts.max_coords) {
            let fp = eval_at(g, i, opts.h)?;
            let fm = eval_at(g, i, -opts.h)?;
            let fwd = (fp - f0) / opts.h;
            let bwd = (f0 - fm) / opts.h;
            if (fwd - bwd).abs() > opts.kink_tol * fwd.abs().max(bwd.abs()) + opts.abs_floor {
                report.skipped_nonsmooth += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let err = relative_error(analytic.data()[i], numeric, opts.abs_floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        g.set_leaf_value(leaf, original)?;
        g.recompute_from(leaf)?;
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}

/// Builds a graph around `point` with `build` and checks the gradient of the
/// resulting scalar w.r.t. `point`.
pub fn grad_check_fn<F>(point: &Tensor, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = build(&mut g, x)?;
    grad_check(&mut g, loss, &[x], opts)
}

/// Runs [`grad_check_fn`] on several points and merges the reports.
pub fn grad_check_many<F>(points: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_nonsmooth: 0,
        passed: true,
    };
    for p in points {
        total.merge(&grad_check_fn(p, &build, opts)?);
    }
    Ok(total)
}

/// A deterministic pseudo-random point in `[lo, hi)`, convenient for checks.
pub fn sample_point(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = sample_point(Shape::new(1, 3, 3, 1), -2.0, 2.0, 1);
        let r = grad_check_fn(
            &p,
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.scale(sq, 3.0);
                let lin = g.add(s, x)?;
                Ok(g.mean(lin))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 9);
    }

    #[test]
    fn abs_at_zero_is_excluded() {
        let r = grad_check_fn(
            &Tensor::scalar(0.0),
            |g, x| {
                let a = g.abs(x);
                Ok(g.mean(a))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 0);
        assert_eq!(r.skipped_nonsmooth, 1);
        assert!(r.passed);
    }

    #[test]
    fn every_op_passes() {
        let opts = GradCheckOptions::default();
        let shape = Shape::new(2, 7, 8, 3);
        let pos = sample_point(shape, 0.2, 1.5, 10);
        let any = sample_point(shape, -1.5, 1.5, 11);
        let single = sample_point(shape.with_channels(1), 0.2, 1.5, 12);
        let (kx, _) = crate::filters::gaussian_derivative_kernels(1.0).unwrap();

        type Build = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;
        let single_c = single.clone();
        let cases: Vec<(&str, &Tensor, Build)> = vec![
            ("add", &any, Box::new(|g, x| {
                let y = g.add(x, x)?;
                let y = g.mul(y, y)?;
                Ok(g.mean(y))
            })),
            ("sub", &any, Box::new(|g, x| {
                let e = g.exp(x);
                let y = g.sub(e, x)?;
                Ok(g.mean(y))
            })),
            ("mul-broadcast", &pos, Box::new(move |g, x| {
                let s = g.constant(single_c.clone());
                let y = g.mul(x, s)?;
                let y = g.mul(y, x)?;
                Ok(g.mean(y))
            })),
            ("scale-exp", &any, Box::new(|g, x| {
                let y = g.scale(x, -0.7);
                let y = g.exp(y);
                Ok(g.mean(y))
            })),
            ("log", &pos, Box::new(|g, x| {
                let y = g.log_clamped(x, 1e-3)?;
                let y = g.mul(y, y)?;
                Ok(g.mean(y))
            })),
            ("abs", &any, Box::new(|g, x| {
                let y = g.abs(x);
                let y = g.mul(y, x)?;
                Ok(g.mean(y))
            })),
            ("concat", &any, Box::new(|g, x| {
                let e = g.exp(x);
                let c = g.concat(&[x, e])?;
                let y = g.mul(c, c)?;
                Ok(g.mean(y))
            })),
            ("channel-max", &any, Box::new(|g, x| {
                let m = g.channel_max(x);
                let y = g.mul(m, m)?;
                Ok(g.mean(y))
            })),
            ("select", &any, Box::new(|g, x| {
                let s = g.select_channel(x, 1)?;
                let e = g.exp(s);
                Ok(g.mean(e))
            })),
            ("sigmoid", &any, Box::new(|g, x| {
                let s = g.sigmoid(x);
                let y = g.mul(s, x)?;
                Ok(g.mean(y))
            })),
            ("leaky-relu", &any, Box::new(|g, x| {
                let s = g.leaky_relu(x, 0.2);
                let y = g.mul(s, s)?;
                Ok(g.mean(y))
            })),
            ("hypot", &any, Box::new(|g, x| {
                let e = g.exp(x);
                let y = g.hypot(x, e)?;
                Ok(g.mean(y))
            })),
            ("pad", &any, Box::new(|g, x| {
                let p = g.reflection_pad(x, 1)?;
                let y = g.mul(p, p)?;
                Ok(g.mean(y))
            })),
            ("fixed-conv", &any, Box::new(move |g, x| {
                let c = g.fixed_conv2d(x, &kx)?;
                let y = g.mul(c, x)?;
                Ok(g.mean(y))
            })),
        ];
        for (name, point, build) in cases {
            let r = grad_check_fn(point, |g, x| build(g, x), &opts).unwrap();
            assert!(r.passed, "{name}: {r:?}");
            assert!(r.checked > 0, "{name}");
        }
    }
}
