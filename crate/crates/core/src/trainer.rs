//! Training loop: patch sampling and augmentation, Adam with exponential
//! learning-rate decay, checkpoints and the per-step CSV log.
//!
//! Randomness is drawn from one ChaCha8 stream per epoch, derived from the
//! seed and the epoch index alone. A checkpoint therefore only needs the
//! weights, the optimizer moments and the epoch counter to resume a run
//! bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::image::{load_image, sample_patch_with, Augment, ImageTensor};
use crate::losses::{total_loss, InputFeatures, LossBreakdown, LossWeights};
use crate::net::{read_weight_file, write_weight_file, NetConfig, NetworkParams, WeightFile};
use crate::phong::{render_lambertian, suite_scene, SUITE_NAMES};
use crate::physmaps::FeatureParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every array in `params`.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} parameter arrays, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape(format!(
                "adam: array {i} has {} values, gradient {}, moments {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate factor applied at every epoch boundary.
    pub lr_decay: f64,
    pub seed: u64,
    /// Draw one patch pool up front instead of resampling every epoch.
    pub fixed_pool: bool,
    /// Write `epoch_NNNN.iidnet` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub loss_weights: LossWeights,
    pub features: FeatureParams,
    pub adam: AdamConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patches_per_epoch: 2000,
            patch_size: 64,
            batch_size: 16,
            lr0: 0.002,
            lr_decay: (-0.01f64).exp(),
            seed: 0,
            fixed_pool: false,
            checkpoint_every: 10,
            loss_weights: LossWeights::default(),
            features: FeatureParams::default(),
            adam: AdamConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, patches per epoch and batch size must be positive"));
        }
        if self.patch_size < crate::net::MIN_SIDE {
            return Err(Error::invalid(format!(
                "patch size must be at least {}, got {}",
                crate::net::MIN_SIDE,
                self.patch_size
            )));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::invalid(format!("initial learning rate must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("lr decay must be in (0, 1], got {}", self.lr_decay)));
        }
        self.loss_weights.validate()?;
        self.net.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }
}

/// Learning rate during the zero-based `epoch`: `lr0 · decay^epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (epoch as f64 * cfg.lr_decay.ln()).exp()
}

/// One row of `train_log.csv`. `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub recon: f64,
    pub ss: f64,
    pub rrg: f64,
    pub sg: f64,
    pub ram: f64,
    pub total: f64,
    pub lr: f64,
}

/// A named training image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where weights, log and config are written; nothing is written if `None`.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume_from: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean loss breakdown of every epoch run in this call, in order.
    pub epoch_means: Vec<LossBreakdown>,
    pub log: Vec<TrainLogRow>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    /// Completed epochs.
    epoch: usize,
    adam_t: u64,
    seed: u64,
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const POOL_STREAM: u64 = u64::MAX;

fn draw_patches(data: &[&Sample], count: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ImageTensor>> {
    use rand::Rng;
    (0..count)
        .map(|_| {
            let s = data[rng.random_range(0..data.len())];
            Ok(sample_patch_with(&s.image, &s.id, size, rng)?.tensor)
        })
        .collect()
}

fn epoch_patches(
    data: &[&Sample],
    pool: Option<&[ImageTensor]>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<ImageTensor>> {
    use rand::seq::SliceRandom;
    let mut rng = epoch_rng(cfg.seed, epoch as u64);
    let mut patches = match pool {
        Some(pool) => {
            let mut p = pool.to_vec();
            p.shuffle(&mut rng);
            p
        }
        None => draw_patches(data, cfg.patches_per_epoch, cfg.patch_size, &mut rng)?,
    };
    for p in &mut patches {
        *p = p.augmented(Augment::random(&mut rng))?;
    }
    Ok(patches)
}

fn checkpoint_file(params: &NetworkParams, adam: &AdamState, epoch: usize, seed: u64) -> WeightFile {
    let mut file = WeightFile::from_params(params);
    let names: Vec<String> = file.arrays.iter().map(|(n, _)| n.clone()).collect();
    for (i, n) in names.iter().enumerate() {
        file.arrays.push((format!("adam.m.{n}"), adam.m[i].clone()));
        file.arrays.push((format!("adam.v.{n}"), adam.v[i].clone()));
    }
    file.train_state = Some(
        serde_json::to_value(CheckpointState {
            epoch,
            adam_t: adam.t,
            seed,
        })
        .expect("plain struct"),
    );
    file
}

fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(NetworkParams, AdamState, usize)> {
    let file = read_weight_file(path)?;
    if !file.config.same_architecture(&cfg.net) {
        return Err(Error::ConfigMismatch {
            expected: format!("{:?}", cfg.net),
            found: format!("{:?}", file.config),
        });
    }
    let state: CheckpointState = file
        .train_state
        .clone()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "weight file carries no training state".into(),
        })?;
    if state.seed != cfg.seed {
        return Err(Error::ConfigMismatch {
            expected: format!("seed {}", cfg.seed),
            found: format!("seed {}", state.seed),
        });
    }
    let (params, rest) = file.into_params(path)?;
    let mut extra: std::collections::HashMap<String, Vec<f64>> = rest.into_iter().collect();
    let sizes: Vec<usize> = params.named_arrays().iter().map(|(_, v)| v.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &sizes);
    adam.t = state.adam_t;
    for (i, (name, _)) in params.named_arrays().iter().enumerate() {
        for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let key = format!("adam.{kind}.{name}");
            let data = extra.remove(&key).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing optimizer array {key}"),
            })?;
            if data.len() != slot.len() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("optimizer array {key} has wrong length"),
                });
            }
            *slot = data;
        }
    }
    Ok((params, adam, state.epoch))
}

fn write_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn mean_breakdown(rows: &[TrainLogRow], w: &LossWeights) -> LossBreakdown {
    let n = rows.len().max(1) as f64;
    let mut terms = [0.0; 5];
    let mut total = 0.0;
    for r in rows {
        for (t, v) in terms.iter_mut().zip([r.recon, r.ss, r.rrg, r.sg, r.ram]) {
            *t += v / n;
        }
        total += r.total / n;
    }
    let mut b = LossBreakdown::from_terms(terms, w);
    b.total = total;
    b
}

/// One optimization step on a batch of patches. Returns the loss breakdown
/// measured before the update.
pub fn train_step(
    params: &mut NetworkParams,
    adam: &mut AdamState,
    batch: &[ImageTensor],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let input = Tensor::from_images(&batch.iter().collect::<Vec<_>>())?;
    let feats = InputFeatures::compute(&input, &cfg.features)?;
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, true);
    let x = g.constant(input);
    let (r, s) = params.forward_graph(&mut g, &nodes, x)?;
    let loss = total_loss(&mut g, r, s, x, &feats, &cfg.loss_weights, &cfg.features)?;
    let breakdown = loss.breakdown(&g, &cfg.loss_weights);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }
    g.backward(loss.total)?;
    let grads: Vec<Tensor> = nodes
        .0
        .iter()
        .flat_map(|&(k, b)| [k, b])
        .map(|n| g.grad(n).expect("tracked leaf"))
        .collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    drop(g);
    let mut slots = params.arrays_mut();
    let grad_refs: Vec<&[f64]> = grads.iter().map(|t| t.data()).collect();
    adam_step(&mut slots, &grad_refs, adam, lr)?;
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(breakdown)
}

/// Trains a fresh network (or resumes one) on `dataset`.
pub fn train(dataset: &[Sample], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let usable: Vec<&Sample> = dataset
        .iter()
        .filter(|s| {
            let ok = s.image.height() >= cfg.patch_size && s.image.width() >= cfg.patch_size;
            if !ok {
                log::warn!(
                    "skipping {}: {}x{} is smaller than patch size {}",
                    s.id,
                    s.image.height(),
                    s.image.width(),
                    cfg.patch_size
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Dataset(format!(
            "all {} images are smaller than patch size {}",
            dataset.len(),
            cfg.patch_size
        )));
    }
    let usable: Vec<Sample> = usable
        .into_iter()
        .map(|s| Sample {
            id: s.id.clone(),
            image: s.image.to_rgb(),
        })
        .collect();
    let usable: Vec<&Sample> = usable.iter().collect();

    let (mut params, mut adam, start_epoch) = match &opts.resume_from {
        Some(path) => load_checkpoint(path, cfg)?,
        None => {
            let params = NetworkParams::build(&cfg.net)?;
            let sizes: Vec<usize> = params.named_arrays().iter().map(|(_, v)| v.len()).collect();
            (params, AdamState::new(cfg.adam, &sizes), 0)
        }
    };
    if start_epoch > cfg.epochs {
        return Err(Error::invalid(format!(
            "checkpoint is at epoch {start_epoch}, beyond the configured {} epochs",
            cfg.epochs
        )));
    }

    let mut log_rows = Vec::new();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        let text = serde_json::to_string_pretty(cfg).expect("plain config");
        fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = dir.join("train_log.csv");
        if start_epoch > 0 && log_path.exists() {
            log_rows = read_log(&log_path)?;
            log_rows.retain(|r| r.epoch <= start_epoch);
        }
    }

    let pool = if cfg.fixed_pool {
        let mut rng = epoch_rng(cfg.seed, POOL_STREAM);
        Some(draw_patches(&usable, cfg.patches_per_epoch, cfg.patch_size, &mut rng)?)
    } else {
        None
    };

    let mut epoch_means = Vec::new();
    let mut new_rows = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let patches = epoch_patches(&usable, pool.as_deref(), cfg, epoch)?;
        let mut rows = Vec::with_capacity(cfg.steps_per_epoch());
        for (step, batch) in patches.chunks(cfg.batch_size).enumerate() {
            let b = train_step(&mut params, &mut adam, batch, cfg, lr)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("epoch {}, step {}: {what}", epoch + 1, step + 1)),
                    other => other,
                })?;
            rows.push(TrainLogRow {
                epoch: epoch + 1,
                step: step + 1,
                recon: b.recon,
                ss: b.ss,
                rrg: b.rrg,
                sg: b.sg,
                ram: b.ram,
                total: b.total,
                lr,
            });
        }
        let mean = mean_breakdown(&rows, &cfg.loss_weights);
        log::info!(
            "epoch {}/{}: loss {:.6} (recon {:.6}) lr {:.3e}",
            epoch + 1,
            cfg.epochs,
            mean.total,
            mean.recon,
            lr
        );
        epoch_means.push(mean);
        new_rows.extend(rows);
        if let Some(dir) = &opts.out_dir {
            let mut all = log_rows.clone();
            all.extend(new_rows.iter().cloned());
            write_log(&dir.join("train_log.csv"), &all)?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{:04}.iidnet", epoch + 1));
                write_weight_file(&path, &checkpoint_file(&params, &adam, epoch + 1, cfg.seed))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        crate::net::save_weights(&params, dir.join("final.iidnet"))?;
    }
    log_rows.extend(new_rows);
    Ok(TrainOutcome {
        params,
        epoch_means,
        log: log_rows,
    })
}

/// Runs the network on a whole image (1 or 3 channels). Returns reflectance
/// `(H, W, 3)` and shading `(H, W, 1)`.
pub fn decompose(params: &NetworkParams, image: &ImageTensor) -> Result<(ImageTensor, ImageTensor)> {
    let rgb = image.to_rgb();
    let (r, s) = params.forward(&Tensor::from_images(&[&rgb])?)?;
    let r = r.to_images()?.pop().expect("one image");
    let s = s.to_images()?.pop().expect("one image");
    Ok((r, s))
}

/// `R ⊙ S` with `S` broadcast over the channels of `R`.
pub fn reconstruct(r: &ImageTensor, s: &ImageTensor) -> Result<ImageTensor> {
    if s.channels() != 1 || (r.height(), r.width()) != (s.height(), s.width()) {
        return Err(Error::shape(format!(
            "cannot combine reflectance {:?} with shading {:?}",
            r.dims(),
            s.dims()
        )));
    }
    let c = r.channels();
    let data = r.data().iter().enumerate().map(|(i, v)| v * s.data()[i / c]).collect();
    ImageTensor::new(r.height(), r.width(), c, data)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Loads a training directory. The LOL layout (`our485/low`, `our485/high`)
/// uses both exposures of the training split; any other directory contributes
/// every image found recursively. Files are read in sorted path order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let lol = dir.join("our485");
    let roots: Vec<PathBuf> = if lol.join("low").is_dir() || lol.join("high").is_dir() {
        ["low", "high"].iter().map(|s| lol.join(s)).filter(|p| p.is_dir()).collect()
    } else {
        vec![dir.to_path_buf()]
    };
    let mut paths = Vec::new();
    for root in &roots {
        collect_images(root, &mut paths)?;
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let id = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().into_owned();
            Ok(Sample {
                id,
                image: load_image(&p)?,
            })
        })
        .collect()
}

/// `count` diffuse renders cycling through the scene catalogue; scene `k`
/// uses catalogue entry `k mod 4` with seed `seed + k / 4`.
pub fn phong_training_set(count: usize, resolution: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|k| {
            let name = SUITE_NAMES[k % SUITE_NAMES.len()];
            let scene_seed = seed + (k / SUITE_NAMES.len()) as u64;
            let scene = suite_scene(name, scene_seed).expect("catalogue name");
            Ok(Sample {
                id: format!("{name}-{scene_seed}"),
                image: render_lambertian(&scene, resolution)?.image,
            })
        })
        .collect()
}
