//! Training loop: progressive stages, RMSProp + EMA, per-epoch validation,
//! checkpointing, and finetune mode.
//!
//! A [`TrainSession`] owns the model, the optimizer state, the EMA shadows,
//! and the data bundle. Every stochastic choice — epoch shuffles, per-image
//! augmentation, mixup draws, dropout masks — comes from an [`RngStream`]
//! derived from `(seed, purpose, position)`, so a run is a pure function of
//! `(arch, data, plans, config)` and can be interrupted, checkpointed, and
//! resumed bit-exactly: the checkpoint stores the step counter and the seed,
//! and every stream is re-derived from those.
//!
//! Wall-clock columns are the one exception; [`Metrics::deterministic_eq`]
//! compares everything else.

mod checkpoint;
mod optim;

pub use checkpoint::{checkpoint_path, Checkpoint, Record};
pub use optim::{cosine_lr, ema_update, warmup_staircase_lr, RmsProp};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ForwardConfig, Model, MAX_IMAGE_SIZE};
use crate::augment::{
    cutout, mixup, one_hot, randaugment, resize_bilinear, standardize, ChannelStats, DataBundle,
    Dataset, ImageBuf,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::{
    make_schedule, random_resize, vanilla_progressive, RegMagnitudes, StagePlan, StageSchedule,
    DEFAULT_RESAMPLE_EPOCHS,
};
use crate::tensor::{Scalar, Shape, Tape, Tensor};

/// Ops applied per image by the augmentation policy.
const RANDAUG_NUM_OPS: usize = 2;

/// Default step budget for finetuning (the full-scale recipe's 10,000 scaled
/// down for desk runs).
pub const DEFAULT_FINETUNE_STEPS: u64 = 1000;

/// Reference batch size the peak learning rate is quoted for; the effective
/// peak is `lr_peak * batch_size / 4096`.
pub const LR_REFERENCE_BATCH: f64 = 4096.0;

/// How each stage's image size and regularization are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Single stage at the target size and strength.
    Fixed,
    /// Sizes and regularization ramp together.
    ProgressiveAdaptive,
    /// Sizes ramp; regularization pinned at the maximum.
    ProgressiveVanilla,
    /// Size redrawn every few epochs; regularization pinned at the maximum.
    RandomResize,
    /// Size redrawn every few epochs; regularization follows the drawn size.
    RandomResizeAdaptive,
}

/// Which learning-rate curve drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    /// Linear warmup to the batch-scaled peak, then staircase decay.
    WarmupStaircase,
    /// Cosine from `lr_peak` (taken as-is, not batch-scaled) to zero.
    Cosine,
}

/// Optimizer and loop hyperparameters. The defaults are the published
/// training recipe; desk-scale runs mostly override `epochs`, `batch_size`,
/// and `warmup_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub rmsprop_decay: f64,
    pub momentum: f64,
    pub rmsprop_eps: f64,
    pub bn_momentum: f64,
    pub weight_decay: f64,
    /// Peak rate at the 4096-image reference batch (staircase mode scales it
    /// by `batch_size / 4096`; cosine mode uses it directly).
    pub lr_peak: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: f64,
    pub warmup_epochs: f64,
    pub lr_mode: LrMode,
    pub ema_decay: f64,
    pub stochastic_depth_survival: f64,
    /// Cutout window as a fraction of the image side; 0 disables.
    pub cutout_fraction: f64,
    pub schedule_mode: ScheduleMode,
    /// Stop after this many epoch evaluations without a new best minival
    /// accuracy. Off by default so acceptance runs use their full budget.
    pub early_stop_patience: Option<u32>,
    /// Train on only the first N images (after shuffling the epoch order the
    /// subset is fixed, not resampled). Desk-scale runs use this to shrink
    /// real datasets.
    pub max_train_images: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 32,
            rmsprop_decay: 0.9,
            momentum: 0.9,
            rmsprop_eps: 1e-3,
            bn_momentum: 0.99,
            weight_decay: 1e-5,
            lr_peak: 0.256,
            lr_decay_factor: 0.97,
            lr_decay_every_epochs: 2.4,
            warmup_epochs: 5.0,
            lr_mode: LrMode::WarmupStaircase,
            ema_decay: 0.9999,
            stochastic_depth_survival: 0.8,
            cutout_fraction: 0.0,
            schedule_mode: ScheduleMode::ProgressiveAdaptive,
            early_stop_patience: None,
            max_train_images: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Check every field; returns all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.epochs == 0 {
            issues.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            issues.push("batch_size must be positive".to_string());
        }
        for (name, v) in [
            ("rmsprop_decay", self.rmsprop_decay),
            ("momentum", self.momentum),
            ("bn_momentum", self.bn_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                issues.push(format!("{name} {v} outside [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            issues.push(format!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            issues.push(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            issues.push(format!("lr_peak {} must be finite and > 0", self.lr_peak));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            issues.push(format!("lr_decay_factor {} outside (0, 1]", self.lr_decay_factor));
        }
        if self.lr_decay_every_epochs <= 0.0 {
            issues.push(format!("lr_decay_every_epochs {} must be > 0", self.lr_decay_every_epochs));
        }
        if self.warmup_epochs < 0.0 {
            issues.push(format!("warmup_epochs {} must be >= 0", self.warmup_epochs));
        }
        if self.rmsprop_eps <= 0.0 {
            issues.push(format!("rmsprop_eps {} must be > 0", self.rmsprop_eps));
        }
        if !(0.0 < self.stochastic_depth_survival && self.stochastic_depth_survival <= 1.0) {
            issues.push(format!(
                "stochastic_depth_survival {} outside (0, 1]",
                self.stochastic_depth_survival
            ));
        }
        if !(0.0..1.0).contains(&self.cutout_fraction) {
            issues.push(format!("cutout_fraction {} outside [0, 1)", self.cutout_fraction));
        }
        if self.early_stop_patience == Some(0) {
            issues.push("early_stop_patience must be positive when set".to_string());
        }
        if self.max_train_images == Some(0) {
            issues.push("max_train_images must be positive when set".to_string());
        }
        if issues.is_empty() { Ok(()) } else { Err(Error::InvalidConfig { issues }) }
    }

    /// Steps in one epoch over `train_len` images (the final partial batch
    /// counts as a step).
    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        let n = self.max_train_images.map_or(train_len, |m| m.min(train_len));
        (n as u64).div_ceil(self.batch_size as u64)
    }

    /// Total step budget over `train_len` images.
    pub fn total_steps(&self, train_len: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(train_len)
    }

    /// Learning rate at `step` under this config.
    pub fn lr_at(&self, step: u64, steps_per_epoch: u64, total_steps: u64) -> Result<f64> {
        match self.lr_mode {
            LrMode::WarmupStaircase => {
                let peak = self.lr_peak * self.batch_size as f64 / LR_REFERENCE_BATCH;
                warmup_staircase_lr(
                    step,
                    steps_per_epoch,
                    peak,
                    self.warmup_epochs,
                    self.lr_decay_factor,
                    self.lr_decay_every_epochs,
                )
            }
            LrMode::Cosine => Ok(cosine_lr(step, total_steps, self.lr_peak)),
        }
    }
}

/// Resolve the config's schedule mode into concrete stage plans.
pub fn resolve_plans(
    cfg: &TrainConfig,
    sched: &StageSchedule,
    steps_per_epoch: u64,
) -> Result<Vec<StagePlan>> {
    match cfg.schedule_mode {
        ScheduleMode::Fixed => {
            let single = StageSchedule { num_stages: 1, ..*sched };
            make_schedule(&single)
        }
        ScheduleMode::ProgressiveAdaptive => make_schedule(sched),
        ScheduleMode::ProgressiveVanilla => vanilla_progressive(sched),
        ScheduleMode::RandomResize | ScheduleMode::RandomResizeAdaptive => {
            let adaptive = cfg.schedule_mode == ScheduleMode::RandomResizeAdaptive;
            let mut rng = RngStream::derive(cfg.seed, "resize", &[]);
            random_resize(sched, DEFAULT_RESAMPLE_EPOCHS, steps_per_epoch, adaptive, &mut rng)
        }
    }
}

/// One metrics record per training step. Accuracy columns are filled on the
/// steps where the corresponding evaluation ran (epoch ends for minival,
/// stage ends for eval) and empty otherwise. `step_seconds` times the
/// training step only — batch assembly through the weight update —
/// evaluations are untimed, and `cumulative_seconds` sums step times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub stage: usize,
    pub image_size: u32,
    pub dropout: f64,
    pub randaug: f64,
    pub mixup: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub minival_acc: Option<f64>,
    pub minival_acc_ema: Option<f64>,
    pub eval_acc: Option<f64>,
    pub step_seconds: f64,
    pub cumulative_seconds: f64,
}

impl MetricsRow {
    /// Equality on everything except the wall-clock columns.
    pub fn deterministic_eq(&self, other: &MetricsRow) -> bool {
        let a = MetricsRow { step_seconds: 0.0, cumulative_seconds: 0.0, ..self.clone() };
        let b = MetricsRow { step_seconds: 0.0, cumulative_seconds: 0.0, ..other.clone() };
        a == b
    }
}

/// Per-step training records, in step order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
}

impl Metrics {
    /// Row-by-row equality ignoring wall-clock columns.
    pub fn deterministic_eq(&self, other: &Metrics) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.deterministic_eq(b))
    }

    /// Last recorded minival accuracy (raw weights).
    pub fn final_minival(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.minival_acc)
    }

    /// Last recorded held-out evaluation accuracy.
    pub fn final_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_acc)
    }

    /// Total training wall-clock (sum of step times, evaluations excluded).
    pub fn total_seconds(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative_seconds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Metrics> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec?);
        }
        Ok(Metrics { rows })
    }
}

/// Which weights to evaluate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Raw,
    Ema,
}

/// Top-1 accuracy of `model` on `ds` at `image_size`, deterministic
/// eval-mode forward (running batch-norm statistics, no dropout, no
/// augmentation). Batch size only controls memory; the result is invariant
/// to it.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    stats: &ChannelStats,
    image_size: u32,
    batch_size: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::arg("evaluate", "dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::arg("evaluate", "batch_size must be positive"));
    }
    let classes = ds.num_classes as usize;
    // Eval-mode forwards draw nothing; the stream is only a signature filler.
    let mut rng = RngStream::derive(0, "eval", &[]);
    let mut correct = 0usize;
    for start in (0..ds.len()).step_by(batch_size) {
        let end = (start + batch_size).min(ds.len());
        let mut images = Vec::with_capacity(end - start);
        for i in start..end {
            let img = resize_bilinear(&ds.decode(i), image_size as usize)?;
            images.push(standardize(&img, stats));
        }
        let input = pack_batch::<T>(&images)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &input, &ForwardConfig::eval(), &mut rng)?;
        let logits = tape.value(pass.logits);
        let data = logits.data();
        for (row, i) in (start..end).enumerate() {
            let scores = &data[row * classes..(row + 1) * classes];
            let mut best = 0;
            for c in 1..classes {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            if best as u32 == ds.label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn pack_batch<T: Scalar>(images: &[ImageBuf]) -> Result<Tensor<T>> {
    let first = &images[0];
    let shape = Shape::new(images.len(), first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(shape.len());
    for img in images {
        data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(shape, data)
}

/// An in-progress training run: model, optimizer slots, EMA shadows, data,
/// resolved stage plans, and the metrics recorded so far.
pub struct TrainSession<T: Scalar> {
    model: Model<T>,
    data: DataBundle,
    plans: Vec<StagePlan>,
    cfg: TrainConfig,
    opt: RmsProp<T>,
    ema: Vec<Tensor<T>>,
    metrics: Metrics,
    /// Cumulative step count at the end of each stage.
    bounds: Vec<u64>,
    step: u64,
    total_steps: u64,
    steps_per_epoch: u64,
    train_len: usize,
    best_minival: f64,
    bad_evals: u64,
    stopped_early: bool,
    cumulative_seconds: f64,
    epoch_perm: Vec<usize>,
    perm_epoch: Option<u64>,
}

impl<T: Scalar> TrainSession<T> {
    /// Fresh run: the model is initialized from `cfg.seed`.
    pub fn new(
        arch: &ArchSpec,
        data: DataBundle,
        plans: Vec<StagePlan>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let model = Model::new(arch, cfg.seed)?;
        Self::from_model(model, data, plans, cfg)
    }

    /// Run starting from an existing model's weights (finetuning, search
    /// evaluations). Optimizer and EMA state start fresh.
    pub fn from_model(
        model: Model<T>,
        data: DataBundle,
        plans: Vec<StagePlan>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut issues = Vec::new();
        if plans.is_empty() {
            issues.push("no stage plans".to_string());
        }
        for p in &plans {
            if p.steps == 0 {
                issues.push(format!("stage {} has zero steps", p.stage));
            }
            if p.image_size < 8 || p.image_size > MAX_IMAGE_SIZE {
                issues.push(format!("stage {} image size {} outside [8, {MAX_IMAGE_SIZE}]", p.stage, p.image_size));
            }
            p.regs.check(&format!("stage {} regs", p.stage), &mut issues);
        }
        if data.train.is_empty() {
            issues.push("training split is empty".to_string());
        }
        if data.train.channels != 3 {
            issues.push(format!("training images have {} channels, expected 3", data.train.channels));
        }
        if data.train.num_classes != model.arch.num_classes {
            issues.push(format!(
                "dataset has {} classes but the model expects {}",
                data.train.num_classes, model.arch.num_classes
            ));
        }
        if !issues.is_empty() {
            return Err(Error::InvalidConfig { issues });
        }
        let train_len = cfg.max_train_images.map_or(data.train.len(), |m| m.min(data.train.len()));
        let steps_per_epoch = cfg.steps_per_epoch(data.train.len());
        let mut bounds = Vec::with_capacity(plans.len());
        let mut acc = 0u64;
        for p in &plans {
            acc += p.steps;
            bounds.push(acc);
        }
        let opt = RmsProp::new(&model.params, cfg.rmsprop_decay, cfg.momentum, cfg.rmsprop_eps, cfg.weight_decay);
        let ema = model.param_values();
        Ok(TrainSession {
            model,
            data,
            plans,
            cfg,
            opt,
            ema,
            metrics: Metrics::default(),
            bounds,
            step: 0,
            total_steps: acc,
            steps_per_epoch,
            train_len,
            best_minival: f64::NEG_INFINITY,
            bad_evals: 0,
            stopped_early: false,
            cumulative_seconds: 0.0,
            epoch_perm: Vec::new(),
            perm_epoch: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn stopped_early(&self) -> bool {
        self.stopped_early
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn plans(&self) -> &[StagePlan] {
        &self.plans
    }

    pub fn ema_values(&self) -> &[Tensor<T>] {
        &self.ema
    }

    fn stage_of(&self, step: u64) -> usize {
        self.bounds.partition_point(|&end| end <= step)
    }

    /// Accuracy on a bundle split with raw or EMA weights. EMA evaluation
    /// swaps the shadows in and the raw weights back out afterwards;
    /// batch-norm running statistics are shared (shadows track parameters
    /// only).
    pub fn evaluate_split(&mut self, ds: Split, weights: Weights, image_size: u32) -> Result<f64> {
        let Self { model, data, ema, cfg, .. } = self;
        let batch = cfg.batch_size;
        let dataset = match ds {
            Split::Train => &data.train,
            Split::Minival => &data.minival,
            Split::Eval => &data.eval,
        };
        match weights {
            Weights::Raw => evaluate(model, dataset, &data.stats, image_size, batch),
            Weights::Ema => {
                let raw = model.param_values();
                model.set_param_values(ema)?;
                let acc = evaluate(model, dataset, &data.stats, image_size, batch);
                model.set_param_values(&raw)?;
                acc
            }
        }
    }

    /// Run until `until` (global step) or to completion. Early stopping and
    /// divergence can end the run sooner; divergence is an error and leaves
    /// any previously saved checkpoint in place.
    pub fn run(&mut self, until: Option<u64>) -> Result<()> {
        let stop = until.map_or(self.total_steps, |u| u.min(self.total_steps));
        while self.step < stop && !self.stopped_early {
            self.one_step()?;
        }
        Ok(())
    }

    fn one_step(&mut self) -> Result<()> {
        let stage = self.stage_of(self.step);
        let plan = self.plans[stage];
        let epoch = self.step / self.steps_per_epoch;
        let started = Instant::now();
        let (loss, lr) = match self.train_step(&plan, epoch) {
            Ok(out) => out,
            // Any non-finite value surfacing mid-step is a divergence; the
            // step number makes the failure reproducible.
            Err(Error::NonFinite { op, detail }) => {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: format!("{op}: {detail}"),
                })
            }
            Err(e) => return Err(e),
        };
        let step_seconds = started.elapsed().as_secs_f64();
        self.cumulative_seconds += step_seconds;

        let done = self.step + 1;
        let epoch_end = done % self.steps_per_epoch == 0 || done == self.total_steps;
        let stage_end = done == self.bounds[stage];
        let mut minival_acc = None;
        let mut minival_acc_ema = None;
        let mut eval_acc = None;
        if epoch_end && !self.data.minival.is_empty() {
            minival_acc = Some(self.evaluate_split(Split::Minival, Weights::Raw, plan.image_size)?);
            minival_acc_ema =
                Some(self.evaluate_split(Split::Minival, Weights::Ema, plan.image_size)?);
            let acc = minival_acc.unwrap();
            if acc > self.best_minival {
                self.best_minival = acc;
                self.bad_evals = 0;
            } else {
                self.bad_evals += 1;
                if let Some(patience) = self.cfg.early_stop_patience {
                    if self.bad_evals >= patience as u64 {
                        self.stopped_early = true;
                    }
                }
            }
        }
        if stage_end && !self.data.eval.is_empty() {
            eval_acc = Some(self.evaluate_split(Split::Eval, Weights::Raw, plan.image_size)?);
        }
        self.metrics.rows.push(MetricsRow {
            step: self.step,
            epoch,
            stage,
            image_size: plan.image_size,
            dropout: plan.regs.dropout,
            randaug: plan.regs.randaug,
            mixup: plan.regs.mixup,
            lr,
            train_loss: loss,
            minival_acc,
            minival_acc_ema,
            eval_acc,
            step_seconds,
            cumulative_seconds: self.cumulative_seconds,
        });
        self.step += 1;
        Ok(())
    }

    /// Forward, backward, and update for one batch. Returns (loss, lr).
    fn train_step(&mut self, plan: &StagePlan, epoch: u64) -> Result<(f64, f64)> {
        if self.perm_epoch != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.train_len).collect();
            let mut rng = RngStream::derive(self.cfg.seed, "shuffle", &[epoch]);
            perm.shuffle(&mut rng);
            self.epoch_perm = perm;
            self.perm_epoch = Some(epoch);
        }
        let in_epoch = (self.step % self.steps_per_epoch) as usize;
        let lo = in_epoch * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(self.train_len);
        let indices = &self.epoch_perm[lo..hi];

        let size = plan.image_size as usize;
        let cutout_px =
            ((self.cfg.cutout_fraction * size as f64).round() as usize).min(size);
        let classes = self.data.train.num_classes;
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &idx in indices {
            let img = resize_bilinear(&self.data.train.decode(idx), size)?;
            let mut rng = RngStream::derive(self.cfg.seed, "aug", &[epoch, idx as u64]);
            let mut img = randaugment(&img, plan.regs.randaug, RANDAUG_NUM_OPS, &mut rng)?;
            if cutout_px > 0 {
                img = cutout(&img, cutout_px, &mut rng)?;
            }
            images.push(img);
            labels.push(one_hot(self.data.train.label(idx), classes));
        }
        let mut mix_rng = RngStream::derive(self.cfg.seed, "mixup", &[self.step]);
        let (images, labels, _lambda) = mixup(&images, &labels, plan.regs.mixup, &mut mix_rng)?;
        let standardized: Vec<ImageBuf> =
            images.iter().map(|img| standardize(img, &self.data.stats)).collect();
        let input = pack_batch::<T>(&standardized)?;
        let targets: Vec<T> =
            labels.iter().flatten().map(|&v| T::from_f64(v as f64)).collect();

        let mut tape = Tape::new();
        let fwd_cfg = ForwardConfig::train(
            plan.regs.dropout,
            self.cfg.stochastic_depth_survival,
            self.cfg.bn_momentum,
        );
        let mut fwd_rng = RngStream::derive(self.cfg.seed, "fwd", &[self.step]);
        let pass = self.model.forward(&mut tape, &input, &fwd_cfg, &mut fwd_rng)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &targets)?;
        let loss_val = tape.value(loss).item()?.to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("training loss is {loss_val}"),
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<T>>> =
            pass.param_vars.iter().map(|&v| tape.grad(v).map(<[T]>::to_vec)).collect();
        drop(tape);

        let lr = self.cfg.lr_at(self.step, self.steps_per_epoch, self.total_steps)?;
        self.opt.step(&mut self.model.params, &grads, lr)?;
        ema_update(&mut self.ema, &self.model.params, self.cfg.ema_decay);
        Ok((loss_val, lr))
    }

    /// Snapshot the full training state (weights, optimizer slots, EMA
    /// shadows, batch-norm statistics, early-stopping counters).
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.step, self.cfg.seed);
        for p in &self.model.params {
            let s = p.value.shape();
            let dims = vec![s.n as u64, s.c as u64, s.h as u64, s.w as u64];
            ck.push(format!("param.{}", p.name), dims, p.value.data());
        }
        let (acc, mom) = self.opt.slots();
        for (i, p) in self.model.params.iter().enumerate() {
            ck.push(format!("opt.acc.{}", p.name), vec![acc[i].len() as u64], &acc[i]);
            ck.push(format!("opt.mom.{}", p.name), vec![mom[i].len() as u64], &mom[i]);
        }
        for (p, shadow) in self.model.params.iter().zip(&self.ema) {
            let s = shadow.shape();
            let dims = vec![s.n as u64, s.c as u64, s.h as u64, s.w as u64];
            ck.push(format!("ema.{}", p.name), dims, shadow.data());
        }
        for (name, mean, var) in self.model.bn_snapshot() {
            ck.push(format!("bn.{name}.mean"), vec![mean.len() as u64], &mean);
            ck.push(format!("bn.{name}.var"), vec![var.len() as u64], &var);
        }
        ck.push::<f64>("trainer.best_minival", vec![1], &[self.best_minival]);
        ck.push::<f64>("trainer.bad_evals", vec![1], &[self.bad_evals as f64]);
        ck
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuild a session from a checkpoint and continue bit-exactly: every
    /// RNG stream is positional in (seed, epoch, step), so nothing else
    /// needs to be stored.
    pub fn resume(
        arch: &ArchSpec,
        data: DataBundle,
        plans: Vec<StagePlan>,
        cfg: TrainConfig,
        path: &Path,
    ) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.seed != cfg.seed {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was written with seed {}, config says {}",
                ck.seed, cfg.seed
            )));
        }
        let mut session = Self::new(arch, data, plans, cfg)?;
        if ck.step > session.total_steps {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint step {} exceeds the plan total {}",
                ck.step, session.total_steps
            )));
        }
        let mut params = Vec::with_capacity(session.model.params.len());
        for p in &session.model.params {
            let rec = ck.require(&format!("param.{}", p.name))?;
            let values = rec.to_scalars::<T>()?;
            params.push(Tensor::from_vec(p.value.shape(), values).map_err(|_| {
                Error::CheckpointMismatch(format!(
                    "record param.{} has {} values, expected {}",
                    p.name,
                    rec.num_elements(),
                    p.value.shape().len()
                ))
            })?);
        }
        session.model.set_param_values(&params)?;
        for i in 0..session.model.params.len() {
            let name = session.model.params[i].name.clone();
            let acc = ck.require(&format!("opt.acc.{name}"))?.to_scalars::<T>()?;
            let mom = ck.require(&format!("opt.mom.{name}"))?.to_scalars::<T>()?;
            session.opt.restore_slot(i, &acc, &mom)?;
            let shadow = ck.require(&format!("ema.{name}"))?.to_scalars::<T>()?;
            let shape = session.ema[i].shape();
            session.ema[i] = Tensor::from_vec(shape, shadow).map_err(|_| {
                Error::CheckpointMismatch(format!("record ema.{name} does not match {shape}"))
            })?;
        }
        let bn_names: Vec<String> =
            session.model.bn_snapshot().into_iter().map(|(name, _, _)| name).collect();
        for name in bn_names {
            let m = ck.require(&format!("bn.{name}.mean"))?.to_scalars::<T>()?;
            let v = ck.require(&format!("bn.{name}.var"))?.to_scalars::<T>()?;
            session.model.restore_bn(&name, &m, &v)?;
        }
        session.best_minival = ck.require("trainer.best_minival")?.to_scalars::<f64>()?[0];
        session.bad_evals = ck.require("trainer.bad_evals")?.to_scalars::<f64>()?[0] as u64;
        session.step = ck.step;
        Ok(session)
    }
}

/// Which split of the bundle to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Minival,
    Eval,
}

/// Build a session and run it to completion.
pub fn train<T: Scalar>(
    arch: &ArchSpec,
    data: DataBundle,
    plans: Vec<StagePlan>,
    cfg: TrainConfig,
) -> Result<TrainSession<T>> {
    let mut session = TrainSession::new(arch, data, plans, cfg)?;
    session.run(None)?;
    Ok(session)
}

/// Transfer-learning settings derived from a base config: cosine decay from
/// an absolute 0.001, weight decay disabled, cutout on, no warmup. Pure so
/// the transformation itself is testable.
pub fn finetune_train_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        weight_decay: 0.0,
        lr_mode: LrMode::Cosine,
        lr_peak: 1e-3,
        warmup_epochs: 0.0,
        cutout_fraction: 0.25,
        ..base.clone()
    }
}

/// Single-stage plan for finetuning: fixed size, augmentation off except
/// dropout (cutout comes from the config).
pub fn finetune_plan(image_size: u32, steps: u64, dropout: f64) -> Vec<StagePlan> {
    vec![StagePlan {
        stage: 0,
        image_size,
        regs: RegMagnitudes { dropout, randaug: 0.0, mixup: 0.0 },
        steps,
    }]
}

/// Finetune an existing model for `steps` steps at `image_size`.
pub fn finetune<T: Scalar>(
    model: Model<T>,
    data: DataBundle,
    image_size: u32,
    steps: u64,
    base: &TrainConfig,
) -> Result<TrainSession<T>> {
    let cfg = finetune_train_config(base);
    let dropout = 0.1;
    let mut session = TrainSession::from_model(model, data, finetune_plan(image_size, steps, dropout), cfg)?;
    session.run(None)?;
    Ok(session)
}
