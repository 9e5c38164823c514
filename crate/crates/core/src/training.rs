//! Optimization loop: Adam over the flow-rendering objective with gradient
//! accumulation, periodic checkpoints, JSON-lines metrics and exact resume.
//!
//! The sample order of every epoch is a pure function of `(seed, epoch)`,
//! so a checkpoint only needs the parameters, the optimizer moments and the
//! position inside the epoch to continue an interrupted run bit for bit.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, MODEL_PREFIX};
use crate::datagen::{Dataset, ManifestEntry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::model::{CapsuleModel, ModelConfig};
use crate::raster::stack_frames;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Training recipe. Model settings (`num_capsules`, `capsule_dim`, decoder
/// depth, ...) sit at the top level of the JSON next to the optimizer ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pairs per forward/backward pass; gradients of the micro-batches of a
    /// batch are summed before the update.
    pub micro_batch: usize,
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(flatten)]
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    pub dataset_dir: Option<PathBuf>,
    /// Write a checkpoint every this many optimizer steps; 0 writes only
    /// the final one.
    pub checkpoint_every: u64,
    /// Append a step line to the metrics log every this many steps; 0 logs
    /// epochs only.
    pub log_every: u64,
    /// Use only the first `n` training pairs.
    pub max_train_samples: Option<usize>,
    /// Validation pairs scored at the end of every epoch; 0 disables it.
    pub val_samples: usize,
    pub precision: Precision,
    /// Run the loop on a single thread for bit-reproducible results.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 150,
            batch_size: 64,
            micro_batch: 8,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            dataset_dir: None,
            checkpoint_every: 1000,
            log_every: 0,
            max_train_samples: None,
            val_samples: 256,
            precision: Precision::F32,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch_size and micro_batch must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// Adam moments, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &CapsuleModel) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in model.params().iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Adam { config, m, v })
    }

    /// Applies update number `t` (1-based) with learning rate `lr`.
    pub fn step(
        &mut self,
        params: &BTreeMap<String, Var>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (name, var) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).ok_or_else(|| missing(name))?;
            let v = self.v.get_mut(name).ok_or_else(|| missing(name))?;
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
        }
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Checkpoint(format!("optimizer state has no entry for `{name}`"))
}

/// Running sums of the loss terms over the batches of the current epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSums {
    pub render: f64,
    pub center: f64,
    pub smooth: f64,
    pub total: f64,
    pub batches: u64,
}

impl LossSums {
    fn add(&mut self, l: &LossBreakdown) {
        self.render += l.render;
        self.center += l.center;
        self.smooth += l.smooth;
        self.total += l.total;
        self.batches += 1;
    }

    pub fn mean(&self) -> LossBreakdown {
        let n = self.batches.max(1) as f64;
        LossBreakdown {
            render: self.render / n,
            center: self.center / n,
            smooth: self.smooth / n,
            total: self.total / n,
        }
    }
}

/// Where the loop stands: `batch` batches of epoch `epoch` are done.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub epoch_sums: LossSums,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    progress: Progress,
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: CapsuleModel,
    pub adam: Adam,
    pub progress: Progress,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        let model = CapsuleModel::new(
            config.model.clone(),
            config.seed,
            &Device::Cpu,
            config.precision.dtype(),
        )?;
        let adam = Adam::new(config.adam, &model)?;
        Ok(TrainState {
            model,
            adam,
            progress: Progress::default(),
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_model(&self.model, self.progress.step)?;
        for (name, t) in &self.adam.m {
            ckpt.tensors.insert(format!("{ADAM_M}{name}"), t.clone());
        }
        for (name, t) in &self.adam.v {
            ckpt.tensors.insert(format!("{ADAM_V}{name}"), t.clone());
        }
        ckpt.header.training = Some(serde_json::to_value(TrainingHeader {
            config: config.clone(),
            progress: self.progress,
        })?);
        Ok(ckpt)
    }

    /// Restores a state written by the trainer; the checkpoint must match
    /// `config` in `K`, `C`, resolution and architecture.
    pub fn load(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(path.as_ref(), &Device::Cpu)?;
        ckpt.header.check_compatible(&config.model)?;
        let training: TrainingHeader = match &ckpt.header.training {
            Some(v) => serde_json::from_value(v.clone())?,
            None => {
                return Err(Error::Incompatible(format!(
                    "{} holds no training state",
                    path.as_ref().display()
                )))
            }
        };
        let model = ckpt.model()?;
        if model.dtype() != config.precision.dtype() {
            return Err(Error::Incompatible(format!(
                "checkpoint precision {:?} differs from configured {:?}",
                model.dtype(),
                config.precision
            )));
        }
        let adam = Adam {
            config: config.adam,
            m: ckpt.group(ADAM_M),
            v: ckpt.group(ADAM_V),
        };
        for (name, _) in model.params().iter() {
            if !adam.m.contains_key(name) || !adam.v.contains_key(name) {
                return Err(missing(name));
            }
        }
        debug_assert!(ckpt.group(MODEL_PREFIX).len() == model.params().len());
        Ok(TrainState {
            model,
            adam,
            progress: training.progress,
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `step` or `epoch`.
    pub kind: String,
    pub step: u64,
    pub epoch: usize,
    pub render: f64,
    pub center: f64,
    pub smooth: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_epe: Option<f64>,
}

impl MetricsRecord {
    fn new(kind: &str, step: u64, epoch: usize, l: &LossBreakdown) -> Self {
        MetricsRecord {
            kind: kind.into(),
            step,
            epoch,
            render: l.render,
            center: l.center,
            smooth: l.smooth,
            total: l.total,
            val_iou: None,
            val_epe: None,
        }
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Last checkpoint written, if any.
    pub checkpoint: Option<PathBuf>,
    pub progress: Progress,
    /// Mean loss of every epoch completed during this call.
    pub epoch_losses: Vec<LossBreakdown>,
    /// False when the run stopped at a step limit before finishing.
    pub finished: bool,
}

pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    train_entries: Vec<ManifestEntry>,
    has_val: bool,
    out_dir: PathBuf,
    state: TrainState,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.safetensors"))
}

/// Sample order of `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

impl Trainer {
    /// Starts a new run writing into `out_dir`.
    pub fn new(config: TrainConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let state = TrainState::fresh(&config)?;
        Self::with_state(config, out_dir.into(), state, true)
    }

    /// Continues from a trainer checkpoint. Metrics logged after the
    /// checkpoint's step are discarded.
    pub fn resume(
        checkpoint: impl AsRef<Path>,
        config: TrainConfig,
        out_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        config.validate()?;
        let state = TrainState::load(checkpoint, &config)?;
        Self::with_state(config, out_dir.into(), state, false)
    }

    fn with_state(config: TrainConfig, out_dir: PathBuf, state: TrainState, fresh: bool) -> Result<Self> {
        let dir = config
            .dataset_dir
            .clone()
            .ok_or_else(|| Error::Config("no dataset directory configured".into()))?;
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(Error::Config(format!(
                "{} is not a dataset directory (no {MANIFEST_FILE})",
                dir.display()
            )));
        }
        let dataset = Dataset::open(dir)?;
        dataset.validate()?;
        if dataset.resolution() != (config.model.height, config.model.width) {
            return Err(Error::Config(format!(
                "dataset resolution {:?} differs from model resolution {:?}",
                dataset.resolution(),
                (config.model.height, config.model.width)
            )));
        }
        let mut train_entries = dataset.entries("train")?.to_vec();
        if let Some(n) = config.max_train_samples {
            train_entries.truncate(n);
        }
        if train_entries.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let has_val = dataset.entries("val").map(|e| !e.is_empty()).unwrap_or(false);
        std::fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))
            .map_err(|e| Error::io(&out_dir, e))?;
        let cfg_path = out_dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, serde_json::to_vec_pretty(&config)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        let trainer = Trainer {
            config,
            dataset,
            train_entries,
            has_val,
            out_dir,
            state,
        };
        trainer.reset_metrics(fresh)?;
        Ok(trainer)
    }

    fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(METRICS_FILE)
    }

    fn reset_metrics(&self, fresh: bool) -> Result<()> {
        let path = self.metrics_path();
        let keep: Vec<MetricsRecord> = if fresh || !path.exists() {
            Vec::new()
        } else {
            read_metrics(&path)?
                .into_iter()
                .filter(|r| r.step <= self.state.progress.step)
                .collect()
        };
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in keep {
            writeln!(f, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn log(&self, record: &MetricsRecord) -> Result<()> {
        let path = self.metrics_path();
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&path, e))
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CapsuleModel {
        &self.state.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_entries.len().div_ceil(self.config.batch_size)
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let path = checkpoint_path(&self.out_dir, self.state.progress.step);
        self.state.to_checkpoint(&self.config)?.save(&path)?;
        Ok(path)
    }

    /// Runs until the configured number of epochs, or until the global step
    /// reaches `stop_at_step` (without writing a checkpoint there, as if the
    /// process had been killed).
    pub fn run(&mut self, stop_at_step: Option<u64>) -> Result<TrainOutcome> {
        if self.config.deterministic {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            pool.install(|| self.run_inner(stop_at_step))
        } else {
            self.run_inner(stop_at_step)
        }
    }

    fn run_inner(&mut self, stop_at_step: Option<u64>) -> Result<TrainOutcome> {
        let mut last_ckpt = None;
        let mut epoch_losses = Vec::new();
        let steps_per_epoch = self.steps_per_epoch();
        while self.state.progress.epoch < self.config.epochs {
            if stop_at_step.is_some_and(|s| self.state.progress.step >= s) {
                return Ok(TrainOutcome {
                    checkpoint: last_ckpt,
                    progress: self.state.progress,
                    epoch_losses,
                    finished: false,
                });
            }
            let epoch = self.state.progress.epoch;
            let order = epoch_order(self.config.seed, epoch, self.train_entries.len());
            let b = self.state.progress.batch;
            let lo = b * self.config.batch_size;
            let hi = (lo + self.config.batch_size).min(order.len());
            let batch: Vec<ManifestEntry> =
                order[lo..hi].iter().map(|&i| self.train_entries[i].clone()).collect();

            let loss = self.train_step(&batch)?;
            let p = &mut self.state.progress;
            p.step += 1;
            p.batch += 1;
            p.epoch_sums.add(&loss);
            let step = p.step;
            if self.config.log_every > 0 && step % self.config.log_every == 0 {
                self.log(&MetricsRecord::new("step", step, epoch, &loss))?;
            }
            if self.state.progress.batch == steps_per_epoch {
                let mean = self.state.progress.epoch_sums.mean();
                let mut record = MetricsRecord::new("epoch", step, epoch, &mean);
                if self.has_val && self.config.val_samples > 0 {
                    let report = evaluate(
                        &self.state.model,
                        &self.dataset,
                        &EvalOptions {
                            split: "val".into(),
                            batch_size: self.config.micro_batch,
                            max_samples: Some(self.config.val_samples),
                            ..EvalOptions::default()
                        },
                    )?;
                    record.val_iou = Some(report.amodal.overall);
                    record.val_epe = report.epe;
                }
                log::info!(
                    "epoch {} step {} total {:.6} render {:.6} val_iou {:?}",
                    epoch,
                    step,
                    mean.total,
                    mean.render,
                    record.val_iou
                );
                self.log(&record)?;
                epoch_losses.push(mean);
                let p = &mut self.state.progress;
                p.epoch += 1;
                p.batch = 0;
                p.epoch_sums = LossSums::default();
            }
            let done = self.state.progress.epoch >= self.config.epochs;
            if done || (self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0) {
                last_ckpt = Some(self.save_checkpoint()?);
            }
        }
        Ok(TrainOutcome {
            checkpoint: last_ckpt,
            progress: self.state.progress,
            epoch_losses,
            finished: true,
        })
    }

    /// One optimizer update on `batch`, accumulating micro-batch gradients.
    fn train_step(&mut self, batch: &[ManifestEntry]) -> Result<LossBreakdown> {
        let model = &self.state.model;
        let params: BTreeMap<String, Var> =
            model.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let n = batch.len() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = LossBreakdown::default();
        for chunk in batch.chunks(self.config.micro_batch) {
            let frames = chunk
                .par_iter()
                .map(|e| self.dataset.load_images("train", e))
                .collect::<Result<Vec<_>>>()?;
            let a = stack_frames(frames.iter().map(|f| &f.0), model.device(), model.dtype())?;
            let b = stack_frames(frames.iter().map(|f| &f.1), model.device(), model.dtype())?;
            let terms = total_loss(model, &a, &b, &self.config.weights)?;
            let frac = chunk.len() as f64 / n;
            let part = terms.breakdown()?;
            loss.render += frac * part.render;
            loss.center += frac * part.center;
            loss.smooth += frac * part.smooth;
            loss.total += frac * part.total;
            let store = (terms.total * frac)?.backward()?;
            for (name, var) in &params {
                if let Some(g) = store.get(var.as_tensor()) {
                    let g = g.detach();
                    let acc = match grads.remove(name) {
                        Some(prev) => (prev + g)?,
                        None => g,
                    };
                    grads.insert(name.clone(), acc);
                }
            }
        }
        let mut bad_grads = Vec::new();
        for (name, g) in &grads {
            let s = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                bad_grads.push(name.clone());
            }
        }
        if !loss.is_finite() || !bad_grads.is_empty() {
            return Err(self.dump_diagnostics(batch, &loss, &bad_grads));
        }
        let t = self.state.progress.step + 1;
        self.state
            .adam
            .step(&params, &grads, self.config.learning_rate, t)?;
        Ok(loss)
    }

    fn dump_diagnostics(&self, batch: &[ManifestEntry], loss: &LossBreakdown, bad: &[String]) -> Error {
        let p = self.state.progress;
        let detail = format!(
            "loss {loss:?}; non-finite gradients in {} parameter(s)",
            bad.len()
        );
        let dump = serde_json::json!({
            "step": p.step + 1,
            "epoch": p.epoch,
            "batch": p.batch,
            "samples": batch.iter().map(|e| e.idx).collect::<Vec<_>>(),
            "loss": loss,
            "nonfinite_gradients": bad,
        });
        let path = self.out_dir.join(DIAGNOSTICS_FILE);
        if let Ok(bytes) = serde_json::to_vec_pretty(&dump) {
            let _ = std::fs::write(&path, bytes);
        }
        Error::NonFinite {
            step: p.step + 1,
            detail: format!("{detail}; diagnostics written to {}", path.display()),
        }
    }
}

/// Trains from scratch per `config` and returns the outcome.
pub fn train(config: TrainConfig, out_dir: impl Into<PathBuf>) -> Result<TrainOutcome> {
    Trainer::new(config, out_dir)?.run(None)
}

/// Continues the run stored in `checkpoint` to completion.
pub fn resume(
    checkpoint: impl AsRef<Path>,
    config: TrainConfig,
    out_dir: impl Into<PathBuf>,
) -> Result<TrainOutcome> {
    Trainer::resume(checkpoint, config, out_dir)?.run(None)
}

/// Header of a checkpoint written by the trainer, without loading tensors
/// into a model.
pub fn checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    Ok(Checkpoint::load(path, &Device::Cpu)?.header)
}
