//! AdamW training with linear warmup and cosine decay, fresh random masks per
//! cutout per epoch, and the `ENKP` checkpoint format.
//!
//! Checkpoint layout: `"ENKP"`, u32 LE version, u32 LE header length, a UTF-8
//! JSON header (configs, optimizer scalars and a tensor directory of name,
//! dtype code, shape and payload offset), then the little-endian `f64`
//! payloads in directory order. Offsets count from the first payload byte.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Cutout;
use crate::error::{EnkiError, Result};
use crate::format::{u32_field, write_u32, write_values, ByteReader, Dtype};
use crate::model::{MaskedAutoencoder, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::patching::{random_mask_seeded, MaskSpec};
use crate::rng::{derive_seed, rng_from_seed};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ENKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSchedule {
    /// New masks for every cutout every epoch.
    PerEpoch,
    /// One mask per cutout for the whole run.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_percent: f64,
    pub base_learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Cutouts per forward pass; gradients accumulate to `batch_size`. Zero
    /// means the whole batch at once.
    pub micro_batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub masks: MaskSchedule,
    /// Save a checkpoint every this many epochs; zero disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full(75.0)
    }
}

impl TrainConfig {
    /// The full-scale schedule: 400 epochs, 40 of warmup, batch 64.
    pub fn full(t_percent: f64) -> Self {
        TrainConfig {
            t_percent,
            base_learning_rate: if t_percent == 75.0 { 1.5e-4 } else { 1e-4 },
            weight_decay: 0.05,
            warmup_epochs: 40,
            total_epochs: 400,
            batch_size: 64,
            micro_batch_size: 0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            masks: MaskSchedule::PerEpoch,
            checkpoint_every: 0,
        }
    }

    /// Desk scale: 50 epochs over 4,096 cutouts with 5 of warmup. The small
    /// model tolerates a larger step than the full one.
    pub fn desk(t_percent: f64) -> Self {
        TrainConfig {
            base_learning_rate: 1e-3,
            warmup_epochs: 5,
            total_epochs: 50,
            batch_size: 32,
            micro_batch_size: 16,
            ..Self::full(t_percent)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.t_percent > 0.0 && self.t_percent < 100.0) {
            problems.push(format!("t_percent must lie in (0, 100), got {}", self.t_percent));
        }
        if self.warmup_epochs > self.total_epochs {
            problems.push(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            problems.push("total_epochs and batch_size must be positive".to_string());
        }
        if !(self.base_learning_rate >= 0.0 && self.base_learning_rate.is_finite()) {
            problems.push(format!("base_learning_rate must be non-negative, got {}", self.base_learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            problems.push("betas must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push("eps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EnkiError::invalid(problems.join("; ")))
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    fn init_seed(&self) -> u64 {
        derive_seed(self.seed, 0)
    }

    pub fn shuffle_seed(&self, epoch: usize) -> u64 {
        derive_seed(derive_seed(self.seed, 1), epoch as u64)
    }

    /// Seed for the masks drawn in `epoch`; a fixed schedule always uses epoch 0.
    pub fn mask_seed(&self, epoch: usize) -> u64 {
        let e = match self.masks {
            MaskSchedule::PerEpoch => epoch,
            MaskSchedule::Fixed => 0,
        };
        derive_seed(derive_seed(self.seed, 2), e as u64)
    }

    /// The training mask for one cutout in one epoch.
    pub fn mask_for(&self, model: &ModelConfig, epoch: usize, cutout_id: u64) -> Result<MaskSpec> {
        random_mask_seeded(&model.grid(), self.t_percent, derive_seed(self.mask_seed(epoch), cutout_id))
    }
}

/// Learning rate at `step`: linear from 0 over the warmup, then half a cosine
/// down to exactly 0 at the last step.
pub fn lr_at(step: usize, config: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let base = config.base_learning_rate;
    let warmup = config.warmup_epochs * steps_per_epoch;
    let last = (config.total_epochs * steps_per_epoch).saturating_sub(1);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if last <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive moments with decoupled weight decay. Tensors flagged as no-decay
/// by [`ModelParams::decays`] only see the adaptive step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(EnkiError::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let decay = if params.decays(i) { lr * self.weight_decay } else { 0.0 };
            let p = &mut params.tensors_mut()[i];
            if grads[i].shape() != p.shape() {
                return Err(EnkiError::shape("optimizer step", grads[i].shape(), p.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= lr * step + decay * *w;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the epoch's step losses.
    pub loss: f64,
    pub shuffle_seed: u64,
    pub mask_seed: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Step records as CSV with columns `step,epoch,lr,loss`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| EnkiError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|row| row.map_err(EnkiError::from)).collect()
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Epoch losses under a trailing moving average of `window` epochs.
    pub fn smoothed_epoch_losses(&self, window: usize) -> Vec<f64> {
        let losses = self.epoch_losses();
        let window = window.max(1);
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Progress report handed to the trainer's callback after every epoch.
pub struct EpochReport<'a> {
    pub record: &'a EpochRecord,
    pub total_epochs: usize,
    pub steps: usize,
}

type Progress<'a> = Box<dyn FnMut(&EpochReport) + 'a>;

/// A configured training run. [`train`] covers the common case.
pub struct Trainer<'a> {
    dataset: &'a [Cutout],
    model_config: ModelConfig,
    config: TrainConfig,
    init: Option<ModelParams>,
    checkpoint_dir: Option<PathBuf>,
    progress: Option<Progress<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a [Cutout], model_config: &ModelConfig, config: &TrainConfig) -> Self {
        Trainer {
            dataset,
            model_config: model_config.clone(),
            config: config.clone(),
            init: None,
            checkpoint_dir: None,
            progress: None,
        }
    }

    /// Start from these parameters instead of a fresh initialization.
    pub fn init_params(mut self, params: ModelParams) -> Self {
        self.init = Some(params);
        self
    }

    /// Where periodic checkpoints go when `checkpoint_every` is set.
    pub fn checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn on_epoch(mut self, f: impl FnMut(&EpochReport) + 'a) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    fn check_inputs(&self) -> Result<()> {
        self.model_config.validate()?;
        self.config.validate()?;
        if self.dataset.is_empty() {
            return Err(EnkiError::invalid("training set is empty"));
        }
        let side = self.model_config.image_size;
        if let Some((i, c)) = self
            .dataset
            .iter()
            .enumerate()
            .find(|(_, c)| c.height != side || c.width != side)
        {
            return Err(EnkiError::Item {
                index: i,
                source: Box::new(EnkiError::shape("training cutout", &[c.height, c.width], &[side, side])),
            });
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<(ModelParams, TrainLog)> {
        self.check_inputs()?;
        let cfg = self.config.clone();
        let mut model = MaskedAutoencoder {
            config: self.model_config.clone(),
            params: match self.init.take() {
                Some(p) => p,
                None => ModelParams::init(&self.model_config, cfg.init_seed())?,
            },
        };
        let mut opt = AdamW::new(&model.params, &cfg);
        let n = self.dataset.len();
        let spe = cfg.steps_per_epoch(n);
        let micro = if cfg.micro_batch_size == 0 {
            cfg.batch_size
        } else {
            cfg.micro_batch_size
        };
        let start = Instant::now();
        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0usize;

        for epoch in 0..cfg.total_epochs {
            let shuffle_seed = cfg.shuffle_seed(epoch);
            order.sort_unstable();
            order.shuffle(&mut rng_from_seed(shuffle_seed));
            let mut epoch_loss = 0.0;

            for batch in order.chunks(cfg.batch_size) {
                let lr = lr_at(step, &cfg, spe);
                let masks = batch
                    .iter()
                    .map(|&i| cfg.mask_for(&model.config, epoch, self.dataset[i].meta.id))
                    .collect::<Result<Vec<_>>>()?;
                let per_image = masks[0].num_masked() * model.config.patch_len();
                let normalizer = (per_image * batch.len()) as f64;

                let mut loss = 0.0;
                let mut grads: Option<Vec<Tensor>> = None;
                for (idx, mk) in batch.chunks(micro).zip(masks.chunks(micro)) {
                    let images: Vec<&[f64]> = idx.iter().map(|&i| self.dataset[i].values.as_slice()).collect();
                    let out = model.loss_and_grads(&images, &images, mk, Some(normalizer))?;
                    loss += out.loss;
                    match &mut grads {
                        None => grads = Some(out.grads),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&out.grads) {
                                a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                            }
                        }
                    }
                }
                let grads = grads.expect("batch is non-empty");
                if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                    return Err(non_finite(step, lr, &model.params, &grads));
                }
                opt.update(&mut model.params, &grads, lr)?;
                log.steps.push(StepRecord {
                    step,
                    epoch,
                    lr,
                    loss,
                    wall_seconds: start.elapsed().as_secs_f64(),
                });
                epoch_loss += loss;
                step += 1;
            }

            let record = EpochRecord {
                epoch,
                loss: epoch_loss / spe as f64,
                shuffle_seed,
                mask_seed: cfg.mask_seed(epoch),
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(f) = &mut self.progress {
                f(&EpochReport {
                    record: &record,
                    total_epochs: cfg.total_epochs,
                    steps: step,
                });
            }
            log.epochs.push(record);

            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                if let Some(dir) = &self.checkpoint_dir {
                    fs::create_dir_all(dir)?;
                    let ckpt = Checkpoint {
                        model_config: model.config.clone(),
                        train_config: Some(cfg.clone()),
                        epoch: epoch + 1,
                        params: model.params.clone(),
                        optimizer: Some(opt.clone()),
                    };
                    save_checkpoint(&ckpt, &dir.join(format!("epoch-{:04}.enkp", epoch + 1)))?;
                }
            }
        }
        Ok((model.params, log))
    }
}

fn non_finite(step: usize, lr: f64, params: &ModelParams, grads: &[Tensor]) -> EnkiError {
    let grad_norms = params
        .names()
        .iter()
        .zip(grads)
        .map(|(n, g)| format!("{n}={:e}", g.l2_norm()))
        .collect::<Vec<_>>()
        .join(", ");
    EnkiError::NonFinite { step, lr, grad_norms }
}

/// Train from a fresh initialization derived from `config.seed`.
pub fn train(dataset: &[Cutout], model_config: &ModelConfig, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    Trainer::new(dataset, model_config, config).run()
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    /// Epochs completed when the file was written.
    pub epoch: usize,
    pub params: ModelParams,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn from_params(model_config: &ModelConfig, params: ModelParams) -> Self {
        Checkpoint {
            model_config: model_config.clone(),
            train_config: None,
            epoch: 0,
            params,
            optimizer: None,
        }
    }

    pub fn model(&self) -> MaskedAutoencoder {
        MaskedAutoencoder {
            config: self.model_config.clone(),
            params: self.params.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: u32,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    epoch: usize,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

const MOMENT_PREFIXES: [&str; 2] = ["optimizer.m.", "optimizer.v."];

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&opt.m, &opt.v]) {
            for (name, t) in ckpt.params.names().iter().zip(moments) {
                named.push((format!("{prefix}{name}"), t));
            }
        }
    }
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                dtype: Dtype::F64.code(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += (t.len() * 8) as u64;
            e
        })
        .collect();
    let header = CheckpointHeader {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        epoch: ckpt.epoch,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, u32_field(json.len(), "header length")?)?;
    w.write_all(&json)?;
    for (_, t) in &named {
        write_values(&mut w, t.data(), Dtype::F64)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?), 0);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32("header length")? as usize;
    let header_at = r.offset();
    let mut json = vec![0u8; len];
    r.fill(&mut json, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| EnkiError::format(header_at, format!("checkpoint header: {e}")))?;

    let payload_at = r.offset();
    let mut named = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if r.offset() - payload_at != entry.offset {
            return Err(r.fail(format!("tensor {} expected at payload offset {}", entry.name, entry.offset)));
        }
        let dtype = Dtype::from_code(entry.dtype)
            .ok_or_else(|| r.fail(format!("tensor {} has unknown dtype code {}", entry.name, entry.dtype)))?;
        let count = entry.shape.iter().product();
        let values = r.values(count, dtype, &entry.name)?;
        named.push((entry.name.clone(), Tensor::new(values, &entry.shape)?));
    }
    let mut extra = [0u8; 1];
    if r.fill(&mut extra, "end of file").is_ok() {
        return Err(EnkiError::format(r.offset() - 1, "trailing bytes after the last tensor"));
    }

    let mut moments: [Vec<(String, Tensor)>; 2] = [Vec::new(), Vec::new()];
    let mut params = Vec::new();
    for (name, t) in named {
        match MOMENT_PREFIXES.iter().position(|p| name.starts_with(p)) {
            Some(k) => moments[k].push((name, t)),
            None => params.push((name, t)),
        }
    }
    let params = ModelParams::from_named(&header.model_config, params)?;
    let optimizer = match header.optimizer {
        None => None,
        Some(o) => {
            let [m, v] = moments;
            let order = |list: Vec<(String, Tensor)>, prefix: &str| -> Result<Vec<Tensor>> {
                let mut map: std::collections::HashMap<String, Tensor> = list.into_iter().collect();
                params
                    .iter()
                    .map(|(name, t)| {
                        let m = map
                            .remove(&format!("{prefix}{name}"))
                            .ok_or_else(|| EnkiError::invalid(format!("missing {prefix}{name}")))?;
                        if m.shape() != t.shape() {
                            return Err(EnkiError::shape("optimizer state", m.shape(), t.shape()));
                        }
                        Ok(m)
                    })
                    .collect()
            };
            Some(AdamW {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
                m: order(m, MOMENT_PREFIXES[0])?,
                v: order(v, MOMENT_PREFIXES[1])?,
            })
        }
    };
    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        epoch: header.epoch,
        params,
        optimizer,
    })
}

/// Load only the parameters, insisting they fit `config`.
pub fn load_params_for(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let ckpt = load_checkpoint(path)?;
    let named = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    ModelParams::from_named(config, named)
}
