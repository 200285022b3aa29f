//! Fine-tuning loop: frozen backbone, trainable q/v adapters and CosFace
//! head, AdamW with decoupled weight decay and a cosine learning-rate
//! schedule without warmup.
//!
//! Seeds (from the run seed `s`): adapters `derive(s, "train.adapters")`,
//! head `derive(s, "train.head")`, neck `derive(s, "train.neck")`, sample
//! order of epoch `e` `chain(s, ["train.order", e])`, augmentation of sample
//! `i` in epoch `e` `chain(s, ["train.augment", e, i])`.

mod checkpoint;

pub use checkpoint::{changed_parameters, Checkpoint};

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, AugmentConfig, DatasetManifest, Preprocessor};
use crate::error::{Error, Result};
use crate::lora::AdapterConfig;
use crate::loss::{CosFaceHead, HeadGrads, DEFAULT_MARGIN, DEFAULT_SCALE};
use crate::seed;
use crate::vit::{AdapterGrads, AdapterSet, ViTBackbone};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Half-cosine from `base_lr` at step 0 to zero after the last step.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub margin: f64,
    pub scale: f64,
    pub lora: AdapterConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Width of an optional linear neck before the head; off when absent.
    pub neck: Option<usize>,
    pub augment: AugmentConfig,
    /// Compute per-sample gradients on the rayon pool. Results are
    /// bit-identical either way because the reduction is sequential.
    pub parallel: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: full-scale optimiser settings with batch 64.
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            base_lr: 1e-4,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            margin: DEFAULT_MARGIN,
            scale: DEFAULT_SCALE,
            lora: AdapterConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            neck: None,
            augment: AugmentConfig::default(),
            parallel: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale preset for CASIA-WebFace-sized data: batch 512, 40 epochs.
    pub fn full_scale_casia() -> Self {
        Self {
            batch_size: 512,
            ..Self::default()
        }
    }

    /// Full-scale preset for the larger training sets: batch 512, 30 epochs.
    pub fn full_scale_large() -> Self {
        Self {
            batch_size: 512,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs as f64),
            ("train.batch_size", self.batch_size as f64),
            ("train.base_lr", self.base_lr),
            ("train.scale", self.scale),
            ("train.adam_eps", self.adam_eps),
            ("lora.rank", self.lora.rank as f64),
            ("lora.alpha", self.lora.alpha),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config("train.margin", "must lie in [0, 1)"));
        }
        for (field, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be positive"));
            }
        }
        if self.neck == Some(0) {
            return Err(Error::config("train.neck", "must be positive"));
        }
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    /// Learning rate of optimizer step `step` out of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(self.base_lr, step, total),
        }
    }
}

/// `base · (1 + cos(π · step / total)) / 2`; exactly `base` at step 0 and
/// zero from `total` on.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if step == 0 {
        return base;
    }
    if step >= total {
        return 0.0;
    }
    let t = step as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay; moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates one named parameter in place. [`Self::begin_step`] must run
    /// once per optimizer step before the updates.
    fn update(&mut self, name: &str, param: &mut ArrayD<f64>, grad: &ArrayD<f64>, lr: f64) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }
}

/// Mean loss of a batch and its gradients.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: f64,
    pub adapters: AdapterGrads,
    pub head: HeadGrads,
}

fn sample_grads(
    backbone: &ViTBackbone,
    adapters: &AdapterSet,
    head: &CosFaceHead,
    image: &Array3<f64>,
    label: usize,
) -> Result<BatchGrads> {
    let (emb, cache) = backbone.forward_train(image.view(), adapters)?;
    let row = emb.raw.view().insert_axis(Axis(0));
    let (loss, d_emb, head_grads) = head.loss_and_grads(row, &[label])?;
    let adapter_grads = backbone.backward(adapters, &cache, d_emb.view());
    Ok(BatchGrads {
        loss,
        adapters: adapter_grads,
        head: head_grads,
    })
}

/// Loss and gradients of a batch. Per-sample work may run in parallel; the
/// sum is always taken in batch order.
pub fn batch_grads(
    backbone: &ViTBackbone,
    adapters: &AdapterSet,
    head: &CosFaceHead,
    images: &[Array3<f64>],
    labels: &[usize],
    parallel: bool,
) -> Result<BatchGrads> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if images.len() != labels.len() {
        return Err(Error::dims("batch labels", images.len(), labels.len()));
    }
    let work = |(x, &y): (&Array3<f64>, &usize)| sample_grads(backbone, adapters, head, x, y);
    let per_sample: Vec<BatchGrads> = if parallel {
        images.par_iter().zip(labels.par_iter()).map(work).collect::<Result<_>>()?
    } else {
        images.iter().zip(labels.iter()).map(work).collect::<Result<_>>()?
    };
    let mut iter = per_sample.into_iter();
    let mut total = iter.next().expect("non-empty batch");
    for g in iter {
        total.loss += g.loss;
        total.adapters.add_assign(&g.adapters);
        total.head.weight += &g.head.weight;
        if let (Some((w, b)), Some((gw, gb))) = (&mut total.head.neck, &g.head.neck) {
            *w += gw;
            *b += gb;
        }
    }
    let inv = 1.0 / images.len() as f64;
    total.loss *= inv;
    total.adapters.scale(inv);
    total.head.weight *= inv;
    if let Some((w, b)) = &mut total.head.neck {
        *w *= inv;
        *b *= inv;
    }
    Ok(total)
}

/// Mean CosFace loss of a batch through the adapted backbone (forward only).
pub fn batch_loss(
    backbone: &ViTBackbone,
    adapters: &AdapterSet,
    head: &CosFaceHead,
    images: &[Array3<f64>],
    labels: &[usize],
) -> Result<f64> {
    let mut rows = ndarray::Array2::zeros((images.len(), head.input_dim()));
    for (i, x) in images.iter().enumerate() {
        rows.row_mut(i)
            .assign(&backbone.extract_embedding(x.view(), Some(adapters))?.raw);
    }
    head.loss(rows.view(), labels)
}

impl BatchGrads {
    /// Gradients keyed like [`Checkpoint::trainable`].
    pub fn named(&self, adapters: &AdapterSet) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for ((k, _), g) in adapters.named_factors().into_iter().zip(self.adapters.flat()) {
            out.insert(format!("adapter.{k}"), g.clone().into_dyn());
        }
        out.insert("head.weight".into(), self.head.weight.clone().into_dyn());
        if let Some((w, b)) = &self.head.neck {
            out.insert("head.neck.weight".into(), w.clone().into_dyn());
            out.insert("head.neck.bias".into(), b.clone().into_dyn());
        }
        out
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Where checkpoints and `metrics.jsonl` go; nothing is written when
    /// absent.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still spans the
    /// configured epoch count).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
    /// Mean step loss of each epoch run in this call.
    pub epoch_losses: Vec<f64>,
}

struct Samples {
    images: Vec<RgbImage>,
    labels: Vec<usize>,
    classes: Vec<String>,
}

fn load_samples(manifest: &DatasetManifest) -> Result<Samples> {
    if manifest.is_empty() {
        return Err(Error::InvalidManifest("no training records".into()));
    }
    let images = manifest
        .records
        .par_iter()
        .map(|r| load_image(&manifest.resolve(&r.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Samples {
        images,
        labels: manifest.labels(),
        classes: manifest.identities(),
    })
}

/// Initial state of a run: fresh adapters (`B = 0`), a random head and an
/// empty optimizer.
pub fn initial_checkpoint(
    backbone: &ViTBackbone,
    classes: Vec<String>,
    config: &TrainConfig,
    run_seed: u64,
) -> Result<Checkpoint> {
    config.validate()?;
    let vit = backbone.config.clone();
    let adapters = AdapterSet::init(&vit, config.lora, seed::derive(run_seed, "train.adapters"))?;
    let dim = config.neck.unwrap_or(vit.d_model);
    let mut head = CosFaceHead::init(
        classes.len(),
        dim,
        config.margin,
        config.scale,
        seed::derive(run_seed, "train.head"),
    )?;
    if config.neck.is_some() {
        head = head.with_neck(vit.d_model, seed::derive(run_seed, "train.neck"));
    }
    Ok(Checkpoint {
        config: config.clone(),
        vit,
        seed: run_seed,
        adapters,
        head,
        optimizer: AdamW::new(config),
        epoch: 0,
        step: 0,
        backbone_fingerprint: backbone.fingerprint(),
        classes,
    })
}

/// Trains adapters and head from scratch.
pub fn finetune(
    backbone: &ViTBackbone,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    run_seed: u64,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    let samples = load_samples(manifest)?;
    let start = initial_checkpoint(backbone, samples.classes.clone(), config, run_seed)?;
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("metrics.jsonl");
        std::fs::write(&log, b"").map_err(|e| Error::io(&log, e))?;
    }
    run_epochs(backbone, &samples, start, options)
}

/// Continues a run from a checkpoint. `config` must match the checkpoint's
/// configuration.
pub fn resume(
    checkpoint: Checkpoint,
    backbone: &ViTBackbone,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    checkpoint.verify_backbone(backbone)?;
    check_compatible(&checkpoint.config, config)?;
    let samples = load_samples(manifest)?;
    if samples.classes != checkpoint.classes {
        return Err(Error::IncompatibleCheckpoint(
            "manifest identities differ from the checkpoint's classes".into(),
        ));
    }
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    run_epochs(backbone, &samples, checkpoint, options)
}

fn check_compatible(saved: &TrainConfig, requested: &TrainConfig) -> Result<()> {
    let l = (&saved.lora, &requested.lora);
    let diffs = [
        ("lora.rank", l.0.rank != l.1.rank),
        ("lora.alpha", l.0.alpha != l.1.alpha),
        ("lora.scaling_mode", l.0.scaling_mode != l.1.scaling_mode),
        ("lora.realization", l.0.realization != l.1.realization),
        ("train.margin", saved.margin != requested.margin),
        ("train.scale", saved.scale != requested.scale),
        ("train.neck", saved.neck != requested.neck),
    ];
    if let Some((field, _)) = diffs.iter().find(|(_, d)| *d) {
        return Err(Error::IncompatibleCheckpoint(format!("{field} differs from the checkpoint")));
    }
    if saved != requested {
        return Err(Error::IncompatibleCheckpoint(
            "training configuration differs from the checkpoint".into(),
        ));
    }
    Ok(())
}

fn run_epochs(
    backbone: &ViTBackbone,
    samples: &Samples,
    mut state: Checkpoint,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    let config = state.config.clone();
    let pre = Preprocessor::new(
        backbone.config.image_size,
        backbone.pixel_mean.clone(),
        backbone.pixel_std.clone(),
        config.augment,
    )?;
    let n = samples.images.len();
    let per_epoch = config.steps_per_epoch(n);
    let total = per_epoch * config.epochs;
    let last_epoch = options
        .stop_after_epoch
        .map_or(config.epochs, |e| e.min(config.epochs));
    let mut log = match &options.out_dir {
        Some(dir) => {
            let path = dir.join("metrics.jsonl");
            Some((
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut epoch_losses = Vec::new();

    for epoch in state.epoch..last_epoch {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::chain(
            state.seed,
            &["train.order", &epoch.to_string()],
        )));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let epoch_tag = epoch.to_string();
            let images: Vec<Array3<f64>> = batch
                .par_iter()
                .map(|&i| {
                    let s = seed::chain(state.seed, &["train.augment", &epoch_tag, &i.to_string()]);
                    pre.apply(&samples.images[i], true, s)
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| samples.labels[i]).collect();
            let grads = batch_grads(
                backbone,
                &state.adapters,
                &state.head,
                &images,
                &labels,
                config.parallel,
            )?;
            if !grads.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: grads.loss,
                    step: state.step,
                    epoch,
                });
            }
            let lr = config.lr_at(state.step, total);
            apply_update(&mut state, &grads, lr);
            let record = StepRecord {
                step: state.step,
                epoch,
                lr,
                loss: grads.loss,
            };
            if let Some((file, path)) = &mut log {
                let line = serde_json::to_string(&record)? + "\n";
                file.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
            }
            log::debug!("step {} epoch {} lr {:.3e} loss {:.5}", record.step, epoch, lr, grads.loss);
            epoch_loss += grads.loss;
            records.push(record);
            state.step += 1;
        }
        state.epoch = epoch + 1;
        epoch_losses.push(epoch_loss / per_epoch as f64);
        log::info!("epoch {} mean loss {:.5}", epoch + 1, epoch_losses.last().unwrap());
        if let Some(dir) = &options.out_dir {
            let ckpt_dir = dir.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            state.save(ckpt_dir.join(format!("epoch_{:03}.safetensors", state.epoch)))?;
            state.save(dir.join("checkpoint.safetensors"))?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: state,
        records,
        epoch_losses,
    })
}

fn apply_update(state: &mut Checkpoint, grads: &BatchGrads, lr: f64) {
    let mut named = grads.named(&state.adapters);
    if let Some(clip) = state.config.grad_clip {
        let norm = named
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            for g in named.values_mut() {
                *g *= clip / norm;
            }
        }
    }
    let opt = &mut state.optimizer;
    opt.begin_step();
    for (k, f) in state.adapters.named_factors_mut() {
        let name = format!("adapter.{k}");
        let mut p = std::mem::take(f).into_dyn();
        opt.update(&name, &mut p, &named[&name], lr);
        *f = p.into_dimensionality().expect("2-D factor");
    }
    let head = &mut state.head;
    let mut w = std::mem::take(&mut head.weight).into_dyn();
    opt.update("head.weight", &mut w, &named["head.weight"], lr);
    head.weight = w.into_dimensionality().expect("2-D head");
    if let Some(neck) = &mut head.neck {
        let mut w = std::mem::take(&mut neck.weight).into_dyn();
        opt.update("head.neck.weight", &mut w, &named["head.neck.weight"], lr);
        neck.weight = w.into_dimensionality().expect("2-D neck");
        if let Some(b) = &mut neck.bias {
            let mut p = std::mem::take(b).into_dyn();
            opt.update("head.neck.bias", &mut p, &named["head.neck.bias"], lr);
            *b = p.into_dimensionality().expect("1-D bias");
        }
    }
}

/// Backbone with the checkpoint's adapters folded into its projections.
pub fn export_merged(checkpoint: &Checkpoint, backbone: &ViTBackbone) -> Result<ViTBackbone> {
    checkpoint.verify_backbone(backbone)?;
    backbone.merged(&checkpoint.adapters)
}

/// Reads a metric log written by a run.
pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests;
