//! `iidlab`: render oracle scenes, compute feature maps, train the
//! decomposition network, decompose images and score reconstructions.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use iidlab::image::{load_image, save_image};
use iidlab::mapfile::write_map;
use iidlab::metrics::{evaluate, ImagePair};
use iidlab::net::load_weights;
use iidlab::phong::{render_lambertian, suite_scene, Scene, SUITE_NAMES};
use iidlab::physmaps::{featurize, FeatureParams, DEFAULT_EPS, DEFAULT_SG_THRESHOLD};
use iidlab::trainer::{decompose, load_dataset, phong_training_set, reconstruct, train, TrainConfig, TrainOptions};
use iidlab::{Error, ImageTensor};

#[derive(Parser, Debug)]
#[command(name = "iidlab", version, about = "Physics-guided intrinsic image decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a diffuse oracle scene with its exact reflectance and shading.
    Render(RenderArgs),
    /// Compute RRG, RAM, M_RRG and SG maps for one image.
    Featurize(FeaturizeArgs),
    /// Train the decomposition network.
    Train(TrainArgs),
    /// Split an image into reflectance and shading with trained weights.
    Decompose(DecomposeArgs),
    /// Score produced images against references paired by file name.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Catalogue scene name or path to a scene JSON file.
    #[arg(long)]
    scene: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for catalogue scenes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output resolution as HxW.
    #[arg(long, value_parser = parse_size, default_value = "128x128")]
    size: (usize, usize),
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    /// Input PNG or PPM image.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Derivative-of-Gaussian scale.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Clamp floor for logarithms.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    /// M_RRG threshold above which shading gradients are masked.
    #[arg(long, default_value_t = DEFAULT_SG_THRESHOLD)]
    sg_threshold: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of training images (LOL layout or any PNG/PPM tree).
    #[arg(long, required_unless_present = "phong_suite", conflicts_with = "phong_suite")]
    data: Option<PathBuf>,
    /// Train on this many Phong catalogue renders instead of a directory.
    #[arg(long, value_name = "COUNT")]
    phong_suite: Option<usize>,
    /// Resolution of the Phong renders, HxW.
    #[arg(long, value_parser = parse_size, default_value = "128x128")]
    render_size: (usize, usize),
    /// Output directory for weights, log and config echo.
    #[arg(long)]
    out: PathBuf,
    /// Number of epochs [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Patches drawn per epoch [default: 2000].
    #[arg(long)]
    patches: Option<usize>,
    /// Square patch side in pixels [default: 64].
    #[arg(long)]
    patch_size: Option<usize>,
    /// Patches per optimizer step [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate [default: 0.002].
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for initialization and patch sampling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Sample one patch pool up front instead of every epoch.
    #[arg(long)]
    fixed_pool: bool,
    /// Checkpoint interval in epochs, 0 disables [default: 10].
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// JSON training config; its fields override the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    /// Weight file written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Input PNG or PPM image.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of produced images.
    #[arg(long)]
    produced: PathBuf,
    /// Directory of reference images with matching file names.
    #[arg(long)]
    reference: PathBuf,
    /// Output directory for metrics.csv and metrics.json.
    #[arg(long)]
    out: PathBuf,
    /// Label stored in metrics.json.
    #[arg(long, default_value = "evaluation")]
    label: String,
}

/// Bad flag values or inputs the operator has to fix on the command line.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| format!("invalid dimension {v:?}"))
    };
    Ok((dim(h)?, dim(w)?))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite(_) => 3,
                Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("IIDLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("IIDLAB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_scene(spec: &str, seed: u64) -> Result<(String, Scene)> {
    if let Some(scene) = suite_scene(spec, seed) {
        return Ok((spec.to_string(), scene));
    }
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let scene: Scene =
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid scene file {}: {e}", path.display())))?;
        scene.validate()?;
        let name = path.file_stem().map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
        return Ok((name, scene));
    }
    Err(usage(format!(
        "unknown scene {spec:?}; expected one of {} or a scene JSON file",
        SUITE_NAMES.join(", ")
    )))
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let (name, scene) = load_scene(&args.scene, args.seed)?;
    let triple = render_lambertian(&scene, args.size)?;
    create_dir(&args.out)?;
    save_image(&triple.image, args.out.join("image.png"))?;
    save_image(&triple.reflectance, args.out.join("reflectance.png"))?;
    save_image(&triple.shading, args.out.join("shading.png"))?;
    let manifest = json!({
        "scene": name,
        "seed": args.seed,
        "light_direction": scene.lights[0].direction,
        "resolution": [args.size.0, args.size.1],
    });
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("rendered {name} at {}x{} into {}", args.size.0, args.size.1, args.out.display());
    Ok(())
}

fn cmd_featurize(args: FeaturizeArgs) -> Result<()> {
    let img = load_image(&args.input)?.to_rgb();
    let params = FeatureParams {
        sigma: args.sigma,
        eps: args.eps,
        sg_threshold: args.sg_threshold,
    };
    let feats = featurize(&img, &params)?;
    create_dir(&args.out)?;
    let maps: [(&str, &ImageTensor); 5] = [
        ("rrg", &feats.rrg.0),
        ("ram", &feats.ram.0),
        ("m_rrg", &feats.m_rrg),
        ("sg_x", &feats.sg.gx),
        ("sg_y", &feats.sg.gy),
    ];
    for (name, map) in maps {
        save_image(map, args.out.join(format!("{name}.png")))?;
        write_map(map, args.out.join(format!("{name}.iidmap")))?;
    }
    println!(
        "wrote {} maps for {}x{} image into {}",
        maps.len(),
        img.height(),
        img.width(),
        args.out.display()
    );
    Ok(())
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.patches {
        cfg.patches_per_epoch = v;
    }
    if let Some(v) = args.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.fixed_pool |= args.fixed_pool;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let overlay: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        let mut merged = serde_json::to_value(&cfg)?;
        merge_json(&mut merged, overlay);
        cfg = serde_json::from_value(merged).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    let dataset = match (&args.data, args.phong_suite) {
        (Some(dir), _) => load_dataset(dir)?,
        (None, Some(count)) => phong_training_set(count, args.render_size, cfg.seed)?,
        (None, None) => return Err(usage("either --data or --phong-suite is required")),
    };
    if dataset.is_empty() {
        return Err(Error::Dataset("no training images found".into()).into());
    }
    log::info!("training on {} images for {} epochs", dataset.len(), cfg.epochs);
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        resume_from: args.resume.clone(),
    };
    let outcome = train(&dataset, &cfg, &opts)?;
    if let (Some(first), Some(last)) = (outcome.epoch_means.first(), outcome.epoch_means.last()) {
        println!(
            "trained {} epochs: mean loss {:.6} -> {:.6}; weights in {}",
            outcome.epoch_means.len(),
            first.total,
            last.total,
            args.out.join("final.iidnet").display()
        );
    }
    Ok(())
}

fn cmd_decompose(args: DecomposeArgs) -> Result<()> {
    let params = load_weights(&args.weights)?;
    let img = load_image(&args.input)?;
    let (r, s) = decompose(&params, &img)?;
    let recon = reconstruct(&r, &s)?;
    create_dir(&args.out)?;
    save_image(&r, args.out.join("reflectance.png"))?;
    save_image(&s, args.out.join("shading.png"))?;
    save_image(&recon, args.out.join("reconstruction.png"))?;
    println!("decomposed {} into {}", args.input.display(), args.out.display());
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()).into());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "pnm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if !args.reference.is_dir() {
        return Err(Error::NotFound(args.reference.clone()).into());
    }
    let mut pairs = Vec::new();
    for produced in image_files(&args.produced)? {
        let name = produced.file_name().expect("listed file");
        let reference = args.reference.join(name);
        if !reference.is_file() {
            log::warn!("no reference for {}", produced.display());
            continue;
        }
        pairs.push(ImagePair {
            id: name.to_string_lossy().into_owned(),
            produced: load_image(&produced)?,
            reference: load_image(&reference)?,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no file names in {} match {}",
            args.produced.display(),
            args.reference.display()
        ))
        .into());
    }
    let report = evaluate(&pairs, &args.label)?;
    create_dir(&args.out)?;
    report.write_csv(args.out.join("metrics.csv"))?;
    report.write_json(args.out.join("metrics.json"))?;
    println!(
        "{} pairs: RMSE {:.4}  PSNR {:.4} dB  SSIM {:.4} (0-255 scale)",
        report.count, report.means.rmse, report.means.psnr, report.means.ssim
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Render(a) => cmd_render(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Train(a) => cmd_train(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
