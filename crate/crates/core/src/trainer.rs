//! Joint bidirectional training.
//!
//! Every step draws one batch of aligned pairs and uses each pair twice: once
//! as an infrared-to-visible example (noisy visible target, infrared source)
//! and once as visible-to-infrared. Both noise-prediction errors enter one
//! weighted loss and one optimizer update.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{assemble_input, assemble_input_without_edges, DirectionLabel, ImageTensor, SOURCE_CHANNELS};
use crate::data_io::{write_atomic, PairedSample};
use crate::denoiser::{load_checkpoint, read_manifest, save_checkpoint, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::schedule::{DiffusionSchedule, ScheduleConfig};
use crate::seed::{derive_seed, indexed_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub lambda_ir_to_vis: f64,
    pub lambda_vis_to_ir: f64,
    pub seed: u64,
    pub disable_tdg: bool,
    pub disable_cfc: bool,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Checkpoint cadence in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.9,
            lr_decay_every: 2000,
            batch_size: 8,
            total_iters: 2000,
            lambda_ir_to_vis: 1.0,
            lambda_vis_to_ir: 1.0,
            seed: 0,
            disable_tdg: false,
            disable_cfc: false,
            weight_decay: 0.01,
            grad_clip: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.lambda_ir_to_vis < 0.0 || self.lambda_vis_to_ir < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return bad("batch_size and lr_decay_every must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    /// Learning rate used after `iteration` completed updates.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
    }

    /// Applies the ablation switches to a network configuration.
    pub fn apply_flags(&self, config: &DenoiserConfig) -> DenoiserConfig {
        DenoiserConfig {
            disable_tdg: self.disable_tdg || config.disable_tdg,
            disable_cfc: self.disable_cfc || config.disable_cfc,
            ..config.clone()
        }
    }
}

/// Network inputs for one translation direction over a batch of pairs.
#[derive(Debug, Clone)]
pub struct DirectionBatch {
    pub direction: DirectionLabel,
    /// `[N, C_in, H, W]` assembled conditioning input.
    pub z: Tensor,
    /// `[N, 3, H, W]` source images for the encoder.
    pub source: Tensor,
    pub t: Vec<usize>,
    /// `[N, 3, H, W]` noise added to the targets.
    pub eps: Tensor,
}

impl DirectionBatch {
    pub fn labels(&self) -> Vec<DirectionLabel> {
        vec![self.direction; self.t.len()]
    }
}

/// Noises the target side of each pair and assembles the conditioning input.
pub fn prepare_direction(
    samples: &[&PairedSample],
    direction: DirectionLabel,
    t: &[usize],
    eps: &[Vec<f32>],
    schedule: &DiffusionSchedule,
    with_edges: bool,
) -> Result<DirectionBatch> {
    if samples.is_empty() || t.len() != samples.len() || eps.len() != samples.len() {
        return Err(Error::Argument("batch, steps and noise must have the same non-zero length".into()));
    }
    let (h, w) = (samples[0].ir.height(), samples[0].ir.width());
    let mut z = Vec::new();
    let mut source = Vec::new();
    let mut noise = Vec::new();
    let mut channels = 0;
    for ((s, &ti), e) in samples.iter().zip(t).zip(eps) {
        let target = s.image(direction.target_modality());
        let src = s.image(direction.source_modality());
        let noisy = ImageTensor::new(h, w, target.channels(), schedule.q_sample(target.data(), ti, e)?)?;
        let input = if with_edges {
            assemble_input(&noisy, src, s.edges(direction.source_modality()))?
        } else {
            assemble_input_without_edges(&noisy, src)?
        };
        channels = input.channels();
        z.extend_from_slice(input.data());
        source.extend_from_slice(src.data());
        noise.extend_from_slice(e);
    }
    let n = samples.len();
    Ok(DirectionBatch {
        direction,
        z: Tensor::new(&[n, channels, h, w], z),
        source: Tensor::new(&[n, SOURCE_CHANNELS, h, w], source),
        t: t.to_vec(),
        eps: Tensor::new(&[n, 3, h, w], noise),
    })
}

/// Anything that maps a prepared batch to a noise estimate.
pub trait NoisePredictor {
    fn predict_noise(&self, batch: &DirectionBatch) -> Result<Tensor>;
    fn uses_edges(&self) -> bool;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, batch: &DirectionBatch) -> Result<Tensor> {
        let pyramid = self.encode_source(&batch.source, batch.direction.source_modality())?;
        self.predict(&batch.z, pyramid.as_ref(), &batch.labels(), &batch.t)
    }

    fn uses_edges(&self) -> bool {
        !self.config().disable_cfc
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, batch: &DirectionBatch) -> Result<Tensor> {
        Ok(Tensor::zeros(batch.eps.shape()))
    }

    fn uses_edges(&self) -> bool {
        true
    }
}

/// Random steps and noises for one joint step.
#[derive(Debug, Clone)]
pub struct JointDraws {
    pub t1: Vec<usize>,
    pub t2: Vec<usize>,
    pub eps1: Vec<Vec<f32>>,
    pub eps2: Vec<Vec<f32>>,
}

impl JointDraws {
    /// Steps uniform on `1..=steps`, noises standard normal, all independent.
    pub fn sample<R: Rng>(n: usize, len: usize, steps: usize, rng: &mut R) -> Self {
        let t = |rng: &mut R| (0..n).map(|_| rng.random_range(1..=steps)).collect::<Vec<_>>();
        let t1 = t(rng);
        let t2 = t(rng);
        let eps = |rng: &mut R| {
            (0..n)
                .map(|_| (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
                .collect::<Vec<Vec<f32>>>()
        };
        let eps1 = eps(rng);
        let eps2 = eps(rng);
        Self { t1, t2, eps1, eps2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    pub ir_to_vis: f64,
    pub vis_to_ir: f64,
}

fn mean_squared(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    s / a.len() as f64
}

/// Weighted sum of the two directions' mean squared noise errors.
pub fn joint_loss<P: NoisePredictor>(
    predictor: &P,
    samples: &[&PairedSample],
    draws: &JointDraws,
    lambdas: (f64, f64),
    schedule: &DiffusionSchedule,
) -> Result<JointLoss> {
    let edges = predictor.uses_edges();
    let a = prepare_direction(samples, DirectionLabel::IrToVis, &draws.t1, &draws.eps1, schedule, edges)?;
    let b = prepare_direction(samples, DirectionLabel::VisToIr, &draws.t2, &draws.eps2, schedule, edges)?;
    let ir_to_vis = mean_squared(&predictor.predict_noise(&a)?, &a.eps);
    let vis_to_ir = mean_squared(&predictor.predict_noise(&b)?, &b.eps);
    Ok(JointLoss {
        total: lambdas.0 * ir_to_vis + lambdas.1 * vis_to_ir,
        ir_to_vis,
        vis_to_ir,
    })
}

/// Model, optimizer and progress counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub optimizer: AdamW,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(model: Denoiser, weight_decay: f64) -> Self {
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay,
                ..AdamWConfig::default()
            },
            model.params(),
        );
        Self {
            model,
            optimizer,
            iteration: 0,
        }
    }
}

/// Loss terms and learning rate of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: JointLoss,
    pub lr: f64,
}

fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|&g| (g as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// One gradient step on the joint loss.
pub fn train_step(
    state: &mut TrainState,
    samples: &[&PairedSample],
    draws: &JointDraws,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
) -> Result<StepRecord> {
    let model = &state.model;
    let edges = !model.config().disable_cfc;
    let a = prepare_direction(samples, DirectionLabel::IrToVis, &draws.t1, &draws.eps1, schedule, edges)?;
    let b = prepare_direction(samples, DirectionLabel::VisToIr, &draws.t2, &draws.eps2, schedule, edges)?;
    let (loss, mut grads) = {
        let mut g = Graph::new(model.params());
        let term = |g: &mut Graph, batch: &DirectionBatch| {
            let source = g.input(batch.source.clone());
            let features = model.encode(g, source, batch.direction.source_modality());
            let z = g.input(batch.z.clone());
            let pred = model.forward(g, z, features.as_deref(), &batch.labels(), &batch.t);
            g.mse(pred, &batch.eps)
        };
        let la = term(&mut g, &a);
        let lb = term(&mut g, &b);
        let total = g.weighted_sum(&[(la, cfg.lambda_ir_to_vis as f32), (lb, cfg.lambda_vis_to_ir as f32)]);
        let loss = JointLoss {
            total: g.value(total).item() as f64,
            ir_to_vis: g.value(la).item() as f64,
            vis_to_ir: g.value(lb).item() as f64,
        };
        if !(loss.total.is_finite() && loss.ir_to_vis.is_finite() && loss.vis_to_ir.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: ir_to_vis {}, vis_to_ir {}, t1 {:?}, t2 {:?}",
                state.iteration, loss.ir_to_vis, loss.vis_to_ir, draws.t1, draws.t2
            )));
        }
        (loss, g.backward(total).into_params())
    };
    if let Some(max) = cfg.grad_clip {
        clip_gradients(&mut grads, max);
    }
    let lr = cfg.lr_at(state.iteration);
    state.optimizer.update(state.model.params_mut(), &grads, lr);
    state.iteration += 1;
    Ok(StepRecord {
        iteration: state.iteration,
        loss,
        lr,
    })
}

pub const LOSS_CSV: &str = "losses.csv";
pub const FINAL_DIR: &str = "checkpoint";
const OPTIM_FILE: &str = "optim.bin";
const STATE_FILE: &str = "state.json";

/// Per-epoch averages, one row of the loss CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub iteration: u64,
    pub epoch: u64,
    pub loss_ir_to_vis: f64,
    pub loss_vis_to_ir: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Progress {
    iteration: u64,
    sum_ir_to_vis: f64,
    sum_vis_to_ir: f64,
    count: u64,
    train: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub epochs: Vec<EpochLoss>,
    pub model: Denoiser,
}

fn write_optimizer(dir: &Path, state: &TrainState) -> Result<()> {
    let (m, v) = state.optimizer.moments();
    let mut store = ParamStore::new();
    let params = state.model.params();
    for id in params.ids() {
        let shape = params.get(id).shape();
        store.insert(format!("m/{}", params.name(id)), Tensor::new(shape, m[id.0].clone()));
        store.insert(format!("v/{}", params.name(id)), Tensor::new(shape, v[id.0].clone()));
    }
    let mut blob = Vec::new();
    store.write_to(&mut blob).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(OPTIM_FILE), &blob)
}

fn read_optimizer(dir: &Path, model: &Denoiser, config: AdamWConfig, step: u64) -> Result<AdamW> {
    let path = dir.join(OPTIM_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let store = ParamStore::read_from(&mut bytes.as_slice())?;
    let params = model.params();
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for id in params.ids() {
        for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
            let name = format!("{prefix}/{}", params.name(id));
            let t = store
                .find(&name)
                .map(|i| store.get(i))
                .filter(|t| t.shape() == params.get(id).shape())
                .ok_or_else(|| Error::Config(format!("optimizer state lacks {name}")))?;
            out.push(t.data().to_vec());
        }
    }
    Ok(AdamW::restore(config, step, m, v))
}

fn save_training_checkpoint(
    dir: &Path,
    state: &TrainState,
    schedule: &ScheduleConfig,
    progress: &Progress,
    cfg: &TrainConfig,
) -> Result<()> {
    save_checkpoint(dir, &state.model, schedule, state.iteration, derive_seed(cfg.seed, Stream::Init))?;
    write_optimizer(dir, state)?;
    write_atomic(&dir.join(STATE_FILE), serde_json::to_string_pretty(progress)?.as_bytes())
}

fn json_diff(a: &serde_json::Value, b: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let null = serde_json::Value::Null;
                json_diff(x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), &format!("{prefix}{k}."), out);
            }
        }
        _ if a != b => out.push(format!("{}: checkpoint {a}, requested {b}", prefix.trim_end_matches('.'))),
        _ => {}
    }
}

/// Lists the fields in which a checkpoint's configuration differs from a request.
pub fn config_diff(
    checkpoint: (&DenoiserConfig, &ScheduleConfig),
    requested: (&DenoiserConfig, &ScheduleConfig),
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    json_diff(
        &serde_json::to_value(checkpoint.0)?,
        &serde_json::to_value(requested.0)?,
        "denoiser.",
        &mut out,
    );
    json_diff(
        &serde_json::to_value(checkpoint.1)?,
        &serde_json::to_value(requested.1)?,
        "schedule.",
        &mut out,
    );
    Ok(out)
}

fn append_loss_row(path: &Path, row: &EpochLoss) -> Result<()> {
    let exists = path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on `train`, writing `losses.csv`, periodic checkpoints under
/// `checkpoints/iter_NNNNNNN/` and the final checkpoint under `checkpoint/`.
/// With `resume`, training continues from that checkpoint directory.
pub fn run_training(
    train: &[PairedSample],
    model_config: &DenoiserConfig,
    schedule_config: &ScheduleConfig,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let schedule = schedule_config.build()?;
    let model_config = cfg.apply_flags(model_config);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };

    let (mut state, mut progress) = match resume {
        Some(dir) => {
            let manifest = read_manifest(dir)?;
            let diff = config_diff(
                (&manifest.denoiser, &manifest.schedule),
                (&model_config, schedule_config),
            )?;
            if !diff.is_empty() {
                return Err(Error::Config(format!(
                    "checkpoint {} does not match the requested configuration:\n  {}",
                    dir.display(),
                    diff.join("\n  ")
                )));
            }
            let (model, manifest) = load_checkpoint(dir)?;
            let path = dir.join(STATE_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let progress: Progress = serde_json::from_str(&text)?;
            let optimizer = read_optimizer(dir, &model, adam, manifest.iteration)?;
            let state = TrainState {
                model,
                optimizer,
                iteration: manifest.iteration,
            };
            (state, progress)
        }
        None => {
            let model = Denoiser::new(model_config.clone(), derive_seed(cfg.seed, Stream::Init))?;
            (TrainState::new(model, cfg.weight_decay), Progress::default())
        }
    };
    progress.train = Some(cfg.clone());

    let n = train.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch) as u64;
    let pixels = 3 * train[0].ir.height() * train[0].ir.width();
    let loss_path = out.join(LOSS_CSV);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;

    while state.iteration < cfg.total_iters {
        let it = state.iteration;
        let epoch = it / steps_per_epoch;
        if epoch != order_epoch {
            order = (0..n).collect();
            order.shuffle(&mut indexed_rng(cfg.seed, Stream::Data, 2 * epoch));
            order_epoch = epoch;
        }
        let pos = (it % steps_per_epoch) as usize * batch;
        let picked: Vec<&PairedSample> = order[pos..(pos + batch).min(n)].iter().map(|&i| &train[i]).collect();
        let draws = JointDraws::sample(
            picked.len(),
            pixels,
            schedule.steps(),
            &mut indexed_rng(cfg.seed, Stream::Data, 2 * it + 1),
        );
        let record = match train_step(&mut state, &picked, &draws, cfg, &schedule) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                let snapshot = serde_json::json!({
                    "iteration": it,
                    "t1": draws.t1,
                    "t2": draws.t2,
                    "error": e.to_string(),
                });
                write_atomic(&out.join("nonfinite_snapshot.json"), snapshot.to_string().as_bytes())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        progress.iteration = state.iteration;
        progress.sum_ir_to_vis += record.loss.ir_to_vis;
        progress.sum_vis_to_ir += record.loss.vis_to_ir;
        progress.count += 1;
        if record.iteration % 50 == 0 {
            log::info!(
                "iteration {}: ir_to_vis {:.4} vis_to_ir {:.4} lr {:.3e}",
                record.iteration,
                record.loss.ir_to_vis,
                record.loss.vis_to_ir,
                record.lr
            );
        }
        let epoch_done = state.iteration % steps_per_epoch == 0;
        if epoch_done || state.iteration == cfg.total_iters {
            let row = EpochLoss {
                iteration: state.iteration,
                epoch: epoch + 1,
                loss_ir_to_vis: progress.sum_ir_to_vis / progress.count as f64,
                loss_vis_to_ir: progress.sum_vis_to_ir / progress.count as f64,
                lr: record.lr,
            };
            append_loss_row(&loss_path, &row)?;
            epochs.push(row);
            if epoch_done {
                progress.sum_ir_to_vis = 0.0;
                progress.sum_vis_to_ir = 0.0;
                progress.count = 0;
            }
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            let dir = out.join("checkpoints").join(format!("iter_{:07}", state.iteration));
            save_training_checkpoint(&dir, &state, schedule_config, &progress, cfg)?;
        }
    }
    let final_dir = out.join(FINAL_DIR);
    save_training_checkpoint(&final_dir, &state, schedule_config, &progress, cfg)?;
    Ok(TrainSummary {
        final_checkpoint: final_dir,
        epochs,
        model: state.model,
    })
}

/// Reads a loss CSV written by [`run_training`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochLoss>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
