//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The optional LOL criterion runs only when `IIDLAB_LOL_DIR` points at a LOL
//! dataset root (containing `our485/` and `eval15/`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use iidlab::autograd::{grad_check, grad_check_many, sample_point, GradCheckOptions, Graph, NodeId, Shape, Tensor};
use iidlab::filters::{convolve2d, gaussian_derivative_kernels, spatial_gradient, Border, Kernel2D};
use iidlab::image::load_image;
use iidlab::losses::{total_loss, InputFeatures, LossWeights};
use iidlab::metrics::{psnr, rmse, ssim};
use iidlab::net::{NetConfig, NetworkParams};
use iidlab::phong::{render_lambertian, suite_scene};
use iidlab::physmaps::{clamped_ln, f_ram, f_rrg, f_sg, m_rrg, FeatureParams, DEFAULT_EPS};
use iidlab::trainer::{
    adam_step, decompose, load_dataset, phong_training_set, reconstruct, train, AdamConfig, AdamState, Sample,
    TrainConfig, TrainOptions, TrainOutcome,
};
use iidlab::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn op_cases() -> Vec<(&'static str, Box<dyn Fn(&mut Graph, NodeId) -> iidlab::Result<NodeId>>)> {
    let (kx, _) = gaussian_derivative_kernels(1.0).unwrap();
    let single = sample_point(Shape::new(2, 9, 9, 1), 0.2, 1.5, 77);
    let kernel = sample_point(Shape::new(3, 3, 3, 4), -0.5, 0.5, 78);
    let bias = sample_point(Shape::new(1, 1, 1, 4), -0.5, 0.5, 79);
    vec![
        ("add", Box::new(|g, x| {
            let y = g.add(x, x)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        })),
        ("sub", Box::new(|g, x| {
            let e = g.exp(x);
            let y = g.sub(e, x)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        })),
        ("mul-broadcast", Box::new(move |g, x| {
            let s = g.param(single.clone());
            let y = g.mul(x, s)?;
            let y = g.mul(y, x)?;
            Ok(g.mean(y))
        })),
        ("scale-exp", Box::new(|g, x| {
            let y = g.scale(x, -0.7);
            let y = g.exp(y);
            Ok(g.mean(y))
        })),
        ("log", Box::new(|g, x| {
            let a = g.abs(x);
            let a = g.exp(a);
            let y = g.log(a)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        })),
        ("log-clamped", Box::new(|g, x| {
            let e = g.exp(x);
            let y = g.log_clamped(e, 1e-3)?;
            let y = g.mul(y, x)?;
            Ok(g.mean(y))
        })),
        ("abs", Box::new(|g, x| {
            let y = g.abs(x);
            let y = g.mul(y, x)?;
            Ok(g.mean(y))
        })),
        ("concat", Box::new(|g, x| {
            let e = g.exp(x);
            let c = g.concat(&[x, e])?;
            let y = g.mul(c, c)?;
            Ok(g.mean(y))
        })),
        ("channel-max", Box::new(|g, x| {
            let m = g.channel_max(x);
            let y = g.mul(m, m)?;
            Ok(g.mean(y))
        })),
        ("select-channel", Box::new(|g, x| {
            let s = g.select_channel(x, 2)?;
            let e = g.exp(s);
            Ok(g.mean(e))
        })),
        ("sigmoid", Box::new(|g, x| {
            let s = g.sigmoid(x);
            let y = g.mul(s, x)?;
            Ok(g.mean(y))
        })),
        ("leaky-relu", Box::new(|g, x| {
            let s = g.leaky_relu(x, 0.2);
            let y = g.mul(s, s)?;
            Ok(g.mean(y))
        })),
        ("hypot", Box::new(|g, x| {
            let e = g.exp(x);
            let y = g.hypot(x, e)?;
            Ok(g.mean(y))
        })),
        ("reflection-pad", Box::new(|g, x| {
            let p = g.reflection_pad(x, 2)?;
            let y = g.mul(p, p)?;
            Ok(g.mean(y))
        })),
        ("conv2d", Box::new(move |g, x| {
            let k = g.param(kernel.clone());
            let b = g.param(bias.clone());
            let y = g.conv2d(x, k, b)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        })),
        ("fixed-conv2d", Box::new(move |g, x| {
            let y = g.fixed_conv2d(x, &kx)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        })),
    ]
}

fn gradient_check() -> Check {
    // An undetected kink inside [x - h, x + h] biases the central difference
    // by up to half the one-sided slope gap, so the kink threshold must not be
    // looser than the pass tolerance.
    let opts = GradCheckOptions {
        h: 1e-5,
        tol: 1e-3,
        kink_tol: 1e-3,
        ..GradCheckOptions::default()
    };
    let points: Vec<Tensor> = (0..3).map(|s| sample_point(Shape::new(2, 9, 9, 3), -1.5, 1.5, s)).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, build) in op_cases() {
        let r = grad_check_many(&points, |g, x| build(g, x), &opts).map_err(fail)?;
        if !r.passed {
            return Err(format!("op {name}: max relative error {:.2e}", r.max_rel_error));
        }
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }

    let cfg = NetConfig {
        trunk_blocks: 2,
        trunk_filters: 8,
        neck_filters: 8,
        head_filters: vec![8],
        seed: 5,
        ..NetConfig::default()
    };
    let params = NetworkParams::build(&cfg).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = ImageTensor::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.05..0.95));
    let images = Tensor::from_images(&[&img]).map_err(fail)?;
    let fp = FeatureParams::default();
    let feats = InputFeatures::compute(&images, &fp).map_err(fail)?;
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, true);
    let x = g.leaf(images, true);
    let (r, s) = params.forward_graph(&mut g, &nodes, x).map_err(fail)?;
    let loss = total_loss(&mut g, r, s, x, &feats, &LossWeights::default(), &fp).map_err(fail)?;
    let mut wrt: Vec<NodeId> = nodes.0.iter().flat_map(|(k, b)| [*k, *b]).collect();
    wrt.push(x);
    let r = grad_check(&mut g, loss.total, &wrt, &opts).map_err(fail)?;
    ensure(
        r.passed,
        format!(
            "{} ops on {checked} coords, max rel err {worst:.1e}; total_loss on 2x8 net: {} coords, {} non-smooth skipped, max rel err {:.1e}",
            op_cases().len(),
            r.checked,
            r.skipped_nonsmooth,
            r.max_rel_error
        ),
    )
}

// ----------------------------------------------------- illumination invariance

fn illumination_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let eps = DEFAULT_EPS;
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let h = rng.random_range(12..40);
        let w = rng.random_range(12..40);
        // s ≥ 0.3, so inputs ≥ eps / 0.3 keep s⊙I inside [eps, 1]
        let lo = eps / 0.3;
        let img = ImageTensor::from_fn(h, w, 3, |_, _, _| rng.random_range(lo..1.0));
        let (a, b, phase) = (
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
            rng.random_range(0.0..6.3),
        );
        let field = ImageTensor::from_fn(h, w, 1, |r, c, _| 0.65 + 0.35 * (a * r as f64 + b * c as f64 + phase).sin());
        let lit = ImageTensor::from_fn(h, w, 3, |r, c, ch| field.get(r, c, 0) * img.get(r, c, ch));
        let sigma = 1.0;
        let diffs = [
            max_abs_diff(&f_rrg(&lit, sigma, eps).map_err(fail)?.0, &f_rrg(&img, sigma, eps).map_err(fail)?.0),
            max_abs_diff(&f_ram(&lit, eps).map_err(fail)?.0, &f_ram(&img, eps).map_err(fail)?.0),
            max_abs_diff(&m_rrg(&lit, sigma, eps).map_err(fail)?, &m_rrg(&img, sigma, eps).map_err(fail)?),
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = w.max(d);
        }
    }
    ensure(
        worst.iter().all(|d| *d < 1e-6),
        format!(
            "100 images: max diff f_rrg {:.1e}, f_ram {:.1e}, m_rrg {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// --------------------------------------------------------------- phong SG

fn phong_sg() -> Check {
    let fp = FeatureParams::default();
    let scene = suite_scene("two-tone-sphere", 0).ok_or("missing scene")?;
    let tri = render_lambertian(&scene, (96, 96)).map_err(fail)?;
    let sg = f_sg(&tri.image, fp.sigma, fp.eps, fp.sg_threshold).map_err(fail)?;
    let ln_s = tri.shading.map(|v| clamped_ln(v, fp.eps));
    let oracle = spatial_gradient(&ln_s, fp.sigma).map_err(fail)?;
    let radius = gaussian_derivative_kernels(fp.sigma).map_err(fail)?.0.radius();

    let (h, w) = (tri.image.height(), tri.image.width());
    let same_region = |r: usize, c: usize| {
        let base = tri.reflectance.pixel(r, c);
        if base.iter().all(|v| *v == 0.0) {
            return false;
        }
        for y in r - radius..=r + radius {
            for x in c - radius..=c + radius {
                if tri.reflectance.pixel(y, x) != base || tri.image.pixel(y, x).iter().any(|v| *v <= fp.eps) {
                    return false;
                }
                if tri.shading.get(y, x, 0) <= fp.eps {
                    return false;
                }
            }
        }
        true
    };
    let mut interior = 0usize;
    let mut worst = 0.0f64;
    for r in radius..h - radius {
        for c in radius..w - radius {
            if !same_region(r, c) {
                continue;
            }
            interior += 1;
            for ch in 0..3 {
                worst = worst
                    .max((sg.gx.get(r, c, ch) - oracle.gx.get(r, c, 0)).abs())
                    .max((sg.gy.get(r, c, ch) - oracle.gy.get(r, c, 0)).abs());
            }
        }
    }
    let mut masked = 0usize;
    let mut masked_nonzero = 0usize;
    for i in 0..sg.mask.data().len() {
        if sg.mask.data()[i] >= fp.sg_threshold {
            masked += 1;
            if sg.gx.data()[i] != 0.0 || sg.gy.data()[i] != 0.0 {
                masked_nonzero += 1;
            }
        }
    }
    ensure(
        interior > 500 && worst < 1e-4 && masked > 0 && masked_nonzero == 0,
        format!(
            "{interior} interior pixels, max |f_sg - grad ln S| {worst:.1e}; {masked} masked entries, {masked_nonzero} nonzero"
        ),
    )
}

// ------------------------------------------------------------ convolutions

fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, h, w, cin) = (x.shape().n(), x.shape().h(), x.shape().w(), x.shape().c());
    let (kh, kw, cout) = (k.shape().n(), k.shape().h(), k.shape().c());
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Vec::with_capacity(n * oh * ow * cout);
    for i in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for ci in 0..cin {
                                let xv = x.data()[((i * h + y + dy) * w + xx + dx) * cin + ci];
                                let kv = k.data()[((dy * kw + dx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period.max(1));
    (if m >= n { period - m } else { m }) as usize
}

fn naive_convolve2d(img: &ImageTensor, k: &Kernel2D) -> ImageTensor {
    let r = k.radius() as isize;
    ImageTensor::from_fn(img.height(), img.width(), img.channels(), |y, x, ch| {
        let mut acc = 0.0;
        for dy in 0..k.size() {
            for dx in 0..k.size() {
                let sy = mirror(y as isize + dy as isize - r, img.height());
                let sx = mirror(x as isize + dx as isize - r, img.width());
                acc += k.tap(dy, dx) * img.get(sy, sx, ch);
            }
        }
        acc
    })
}

fn convolution_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..5);
        let kh = rng.random_range(1..5);
        let kw = rng.random_range(1..5);
        let shape = Shape::new(rng.random_range(1..3), rng.random_range(kh..10), rng.random_range(kw..10), cin);
        let x = sample_point(shape, -1.0, 1.0, 1000 + i);
        let k = sample_point(Shape::new(kh, kw, cin, cout), -1.0, 1.0, 2000 + i);
        let b = sample_point(Shape::new(1, 1, 1, cout), -1.0, 1.0, 3000 + i);
        let mut g = Graph::new();
        let (xn, kn, bn) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv2d(xn, kn, bn).map_err(fail)?;
        let expect = naive_conv(&x, &k, &b);
        if g.value(y).numel() != expect.len() {
            return Err(format!("instance {i}: conv2d output size mismatch"));
        }
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }

        let size = 2 * rng.random_range(0..3) + 1;
        let taps = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel = Kernel2D::new(size, taps).map_err(fail)?;
        let channels = if rng.random_bool(0.5) { 1 } else { 3 };
        let img = ImageTensor::from_fn(
            rng.random_range(size..12),
            rng.random_range(size..12),
            channels,
            |_, _, _| rng.random_range(-1.0..1.0),
        );
        let fast = convolve2d(&img, &kernel, Border::Reflect101).map_err(fail)?;
        worst = worst.max(max_abs_diff(&fast, &naive_convolve2d(&img, &kernel)));
    }
    ensure(worst < 1e-12, format!("200 instances each of conv2d and convolve2d, max abs diff {worst:.1e}"))
}

// ------------------------------------------------------------------- Adam

/// Textbook scalar Adam with running bias-correction products.
struct ScalarAdam {
    m: f64,
    v: f64,
    b1t: f64,
    b2t: f64,
}

impl ScalarAdam {
    fn step(&mut self, x: &mut f64, g: f64, lr: f64) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.b1t *= b1;
        self.b2t *= b2;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mhat = self.m / (1.0 - self.b1t);
        let vhat = self.v / (1.0 - self.b2t);
        *x -= lr * mhat / (vhat.sqrt() + eps);
    }
}

fn adam_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let sizes = [rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..20)];
        let curv: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(0.1..5.0)).collect()).collect();
        let centre: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut x: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut xs = x.clone();
        let mut scalar: Vec<Vec<ScalarAdam>> = sizes
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| ScalarAdam {
                        m: 0.0,
                        v: 0.0,
                        b1t: 1.0,
                        b2t: 1.0,
                    })
                    .collect()
            })
            .collect();
        let mut state = AdamState::new(AdamConfig::default(), &sizes);
        let lr = rng.random_range(1e-3..5e-2);
        for _ in 0..100 {
            let grads: Vec<Vec<f64>> = (0..3)
                .map(|a| (0..sizes[a]).map(|i| curv[a][i] * (x[a][i] - centre[a][i])).collect())
                .collect();
            let mut views: Vec<&mut [f64]> = x.iter_mut().map(|v| v.as_mut_slice()).collect();
            let gviews: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
            adam_step(&mut views, &gviews, &mut state, lr).map_err(fail)?;
            for a in 0..3 {
                for i in 0..sizes[a] {
                    let g = curv[a][i] * (xs[a][i] - centre[a][i]);
                    scalar[a][i].step(&mut xs[a][i], g, lr);
                    worst = worst.max((x[a][i] - xs[a][i]).abs());
                }
            }
        }
    }
    ensure(worst < 1e-12, format!("10 quadratics x 100 steps, max abs diff {worst:.1e}"))
}

// --------------------------------------------------------------- training

/// Patch side used by the smoke and determinism runs. See README: the 64 px
/// protocol value makes a 50-epoch run exceed the runtime budget on one core.
const SMOKE_PATCH: usize = 32;

fn smoke_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        patches_per_epoch: 200,
        batch_size: 16,
        patch_size: SMOKE_PATCH,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn smoke_data() -> Vec<Sample> {
    phong_training_set(16, (128, 128), 0).expect("phong suite renders")
}

fn training_psnr(outcome: &TrainOutcome, data: &[Sample]) -> Result<Vec<f64>, String> {
    data.iter()
        .map(|s| {
            let (r, sh) = decompose(&outcome.params, &s.image).map_err(fail)?;
            let rec = reconstruct(&r, &sh).map_err(fail)?;
            psnr(&rec, &s.image).map_err(fail)
        })
        .collect()
}

fn smoke_training(outcome: &Result<TrainOutcome, String>, data: &[Sample], elapsed: Duration) -> Check {
    let outcome = outcome.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let first = outcome.epoch_means.first().ok_or("no epochs")?.total;
    let last = outcome.epoch_means.last().ok_or("no epochs")?.total;
    let finite = outcome.log.iter().all(|r| {
        [r.recon, r.ss, r.rrg, r.sg, r.ram, r.total].iter().all(|v| v.is_finite())
    }) && outcome.params.is_finite();
    let ps = training_psnr(outcome, data)?;
    let mean = ps.iter().sum::<f64>() / ps.len() as f64;
    let min = ps.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(
        last <= 0.5 * first && mean >= 30.0 && finite,
        format!(
            "patch {SMOKE_PATCH}: loss {first:.5} -> {last:.5} (ratio {:.3}); recon PSNR mean {mean:.2} dB, min {min:.2} dB; {} steps finite: {finite}; {:.0}s",
            last / first,
            outcome.log.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism(first_dir: &Path, data: &[Sample]) -> Check {
    let second = tempfile::tempdir().map_err(fail)?;
    train(
        data,
        &smoke_config(),
        &TrainOptions {
            out_dir: Some(second.path().to_path_buf()),
            resume_from: None,
        },
    )
    .map_err(fail)?;
    let mut compared = Vec::new();
    for name in ["final.iidnet", "train_log.csv", "config.json"] {
        let a = fs::read(first_dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = fs::read(second.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        if a != b {
            return Err(format!("{name} differs between runs"));
        }
        compared.push(format!("{name} ({} bytes)", a.len()));
    }
    Ok(format!("identical {}", compared.join(", ")))
}

// ------------------------------------------------------------------ metrics

fn metric_closed_forms() -> Check {
    let a = ImageTensor::filled(32, 32, 3, 0.4);
    let b = a.map(|v| v + 1.0 / 255.0);
    let p = psnr(&a, &b).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let x = ImageTensor::from_fn(40, 30, 3, |_, _, _| rng.random::<f64>());
    let y = ImageTensor::from_fn(40, 30, 3, |_, _, _| rng.random::<f64>());
    let s = ssim(&x, &x).map_err(fail)?;
    let mut sum = 0.0;
    for r in 0..40 {
        for c in 0..30 {
            for ch in 0..3 {
                let d = 255.0 * (x.get(r, c, ch) - y.get(r, c, ch));
                sum += d * d;
            }
        }
    }
    let brute = (sum / 3600.0).sqrt();
    let e = (rmse(&x, &y).map_err(fail)? - brute).abs();
    ensure(
        (p - 48.13).abs() <= 0.01 && (s - 1.0).abs() <= 1e-9 && e <= 1e-12,
        format!("PSNR(1/255) {p:.4} dB; SSIM(x,x) - 1 = {:.1e}; RMSE vs loops {e:.1e}", s - 1.0),
    )
}

// ---------------------------------------------------------------------- LOL

fn lol_pipeline(root: &Path) -> Check {
    let data = load_dataset(root).map_err(fail)?;
    let out = tempfile::tempdir().map_err(fail)?;
    let outcome = train(
        &data,
        &TrainConfig::default(),
        &TrainOptions {
            out_dir: Some(out.path().to_path_buf()),
            resume_from: None,
        },
    )
    .map_err(fail)?;
    let test_dir = root.join("eval15").join("low");
    let mut files: Vec<PathBuf> = fs::read_dir(&test_dir)
        .map_err(|e| format!("{}: {e}", test_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let mut ps = Vec::new();
    for f in &files {
        let img = load_image(f).map_err(fail)?.to_rgb();
        let (r, s) = decompose(&outcome.params, &img).map_err(fail)?;
        ps.push(psnr(&reconstruct(&r, &s).map_err(fail)?, &img).map_err(fail)?);
    }
    if ps.is_empty() {
        return Err(format!("no test images in {}", test_dir.display()));
    }
    let mean = ps.iter().sum::<f64>() / ps.len() as f64;
    ensure(mean > 35.0, format!("{} test images, reconstruction PSNR {mean:.2} dB", ps.len()))
}

// --------------------------------------------------------------------- main

fn report(name: &str, started: Instant, result: Check) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    let quick: [(&str, fn() -> Check); 6] = [
        ("gradient-check", gradient_check),
        ("illumination-invariance", illumination_invariance),
        ("phong-sg-oracle", phong_sg),
        ("convolution-oracle", convolution_oracle),
        ("adam-oracle", adam_oracle),
        ("metric-closed-forms", metric_closed_forms),
    ];
    for (name, check) in quick {
        let t = Instant::now();
        ok &= report(name, t, check());
    }

    let data = smoke_data();
    let run_dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let outcome = train(
        &data,
        &smoke_config(),
        &TrainOptions {
            out_dir: Some(run_dir.path().to_path_buf()),
            resume_from: None,
        },
    )
    .map_err(fail);
    let elapsed = t.elapsed();
    ok &= report("training-smoke", t, smoke_training(&outcome, &data, elapsed));

    let t = Instant::now();
    let det = match &outcome {
        Ok(_) => determinism(run_dir.path(), &data),
        Err(e) => Err(format!("first run failed: {e}")),
    };
    ok &= report("determinism", t, det);

    match std::env::var_os("IIDLAB_LOL_DIR").map(PathBuf::from) {
        Some(root) if root.join("our485").is_dir() => {
            let t = Instant::now();
            ok &= report("lol-pipeline", t, lol_pipeline(&root));
        }
        _ => println!("SKIP lol-pipeline: set IIDLAB_LOL_DIR to a LOL dataset root to run"),
    }

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
