//! Mini-batch training of segmentation networks: supervised dice + focal
//! training and teacher-student distillation share one loop.

use alloc::format;
use alloc::vec::Vec;

use crate::augment::{AugmentConfig, Augmentation};
use crate::data::{ConfidenceTier, DatasetIndex, GroundTruthMask, LabeledExample};
use crate::ensemble::{image_tensor, ProbabilityMap};
use crate::error::{bail, Error, Result};
use crate::loss::{combined_loss, distill_loss, LossConfig, LossOutput, LossShape};
use crate::metrics::IouCounts;
use crate::model::UNet;
use crate::nn::{Adam, AdamConfig, LrSchedule};
use crate::rng;
use crate::sampling::{stratified_batches, BatchPlan};
use crate::tensor::Tensor;

/// Floor for teacher probabilities before they are turned into logits.
pub const TEACHER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: ScheduleKind,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            adam: AdamConfig::default(),
            schedule: ScheduleKind::Constant,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be positive");
        }
        if self.batch_size < 2 {
            bail!(Config, "batch_size must be at least 2, got {}", self.batch_size);
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.adam.lr);
        }
        if self.adam.weight_decay < 0.0 {
            bail!(Config, "weight_decay must be >= 0, got {}", self.adam.weight_decay);
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Loss of every optimizer step, before the update.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// The batches visited in `epoch`.
pub fn epoch_plan(data: &DatasetIndex, cfg: &TrainConfig, epoch: usize) -> Result<BatchPlan> {
    stratified_batches(data, cfg.batch_size, rng::derive(cfg.seed, &[0xE90C, epoch as u64]))
}

/// The augmentation applied to slot `slot` of step `step` in `epoch`.
pub fn slot_augmentation(cfg: &TrainConfig, example: &LabeledExample, epoch: usize, step: usize, slot: usize) -> Result<Augmentation> {
    let seed = rng::derive(cfg.seed, &[0xA11, epoch as u64, step as u64, slot as u64]);
    Augmentation::sample(&cfg.augment, example.mask().height(), example.mask().width(), seed)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|v| f64::from(*v)).collect()
}

fn run<F>(model: &mut UNet, data: &DatasetIndex, cfg: &TrainConfig, mut batch_loss: F) -> Result<TrainHistory>
where
    F: FnMut(&[usize], &[Augmentation], &[f64], LossShape) -> Result<LossOutput>,
{
    cfg.validate()?;
    let mut adam = Adam::new(cfg.adam, model.params());
    let steps_per_epoch = crate::sampling::steps_per_epoch(data.len(), cfg.batch_size);
    let schedule = match cfg.schedule {
        ScheduleKind::Constant => LrSchedule::Constant,
        ScheduleKind::Cosine => LrSchedule::Cosine { total_steps: cfg.epochs * steps_per_epoch },
    };
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(data, cfg, epoch)?;
        let mut epoch_total = 0.0;
        for (step, batch) in plan.batches.iter().enumerate() {
            let augs = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| slot_augmentation(cfg, data.get(i), epoch, step, slot))
                .collect::<Result<Vec<_>>>()?;
            let images = batch
                .iter()
                .zip(&augs)
                .map(|(&i, a)| a.apply_image(data.get(i).image()))
                .collect::<Result<Vec<_>>>()?;
            let input = image_tensor(&images.iter().collect::<Vec<_>>())?;
            let (value, grads) = model.forward_backward(&input, |logits| {
                if !logits.is_finite() {
                    return Err(Error::Training { epoch, reason: format!("non-finite logits at step {step}") });
                }
                let shape = LossShape { batch: logits.batch(), pixels: logits.plane_len() };
                let out = batch_loss(batch, &augs, &to_f64(logits), shape)?;
                let grad = out.grad.iter().map(|v| *v as f32).collect();
                Ok((out.value, Tensor::from_vec(logits.shape(), grad)?))
            })?;
            if !value.is_finite() {
                return Err(Error::Training { epoch, reason: format!("loss is {value} at step {step}") });
            }
            if !grads.is_finite() {
                return Err(Error::Training { epoch, reason: format!("non-finite gradient at step {step}") });
            }
            let lr = schedule.rate(cfg.adam.lr, adam.steps_taken());
            adam.step(model.params_mut(), &grads, lr);
            history.step_losses.push(value);
            epoch_total += value;
        }
        history.epoch_losses.push(epoch_total / plan.steps() as f64);
    }
    Ok(history)
}

/// Supervised training with the weighted dice + focal loss.
pub fn train_model(model: &mut UNet, data: &DatasetIndex, cfg: &TrainConfig, loss: &LossConfig) -> Result<TrainHistory> {
    loss.validate()?;
    run(model, data, cfg, |batch, augs, logits, shape| {
        let mut target = Vec::with_capacity(shape.batch * shape.pixels);
        for (&i, a) in batch.iter().zip(augs) {
            target.extend_from_slice(a.apply_mask(data.get(i).mask())?.labels());
        }
        combined_loss(logits, &target, shape, loss)
    })
}

/// Trains each model on `data`. Models get distinct sampling seeds; with
/// `fine_tune` every model follows the cosine-decay schedule.
pub fn train_stage(
    models: &mut [UNet],
    data: &DatasetIndex,
    cfg: &TrainConfig,
    loss: &LossConfig,
    fine_tune: bool,
) -> Result<Vec<TrainHistory>> {
    if data.is_empty() {
        bail!(Stratification, "training set is empty");
    }
    let mut out = Vec::with_capacity(models.len());
    for (k, model) in models.iter_mut().enumerate() {
        let mut c = cfg.clone();
        c.seed = rng::derive(cfg.seed, &[0x57A6, k as u64]);
        if fine_tune {
            c.schedule = ScheduleKind::Cosine;
        }
        out.push(train_model(model, data, &c, loss)?);
    }
    Ok(out)
}

/// Student training against frozen teacher distributions. `teacher[i]`
/// belongs to `data.get(i)`; high-tier examples count as labeled for the dice
/// term, every example takes part in the distillation term.
pub fn train_student(
    student: &mut UNet,
    data: &DatasetIndex,
    teacher: &[ProbabilityMap],
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainHistory> {
    loss.validate()?;
    if teacher.len() != data.len() {
        bail!(Shape, "{} teacher maps for {} examples", teacher.len(), data.len());
    }
    run(student, data, cfg, |batch, augs, logits, shape| {
        let mut target = Vec::with_capacity(shape.batch * shape.pixels);
        let mut teacher_logits = Vec::with_capacity(logits.len());
        let mut labeled = Vec::with_capacity(shape.batch);
        for (&i, a) in batch.iter().zip(augs) {
            let ex = data.get(i);
            target.extend_from_slice(a.apply_mask(ex.mask())?.labels());
            teacher_logits.extend(a.apply_probs(&teacher[i])?.log_probs(TEACHER_FLOOR));
            labeled.push(ex.tier() == ConfidenceTier::High);
        }
        distill_loss(logits, &teacher_logits, &target, &labeled, shape, loss.distill_alpha, loss.temperature, loss.dice_eps)
    })
}

/// Flooded-class IoU of thresholded predictions over a dataset.
pub fn evaluate_iou<F>(data: &DatasetIndex, mut predict: F) -> Result<f64>
where
    F: FnMut(&LabeledExample) -> Result<GroundTruthMask>,
{
    let mut counts = IouCounts::default();
    for ex in data.examples() {
        counts.add(&predict(ex)?, ex.mask())?;
    }
    Ok(counts.iou())
}

/// Per-pixel argmax of a probability map; ties go to the non-flooded class.
pub fn argmax_mask(probs: &ProbabilityMap) -> GroundTruthMask {
    let labels = probs.class(0).iter().zip(probs.class(1)).map(|(a, b)| u8::from(b > a)).collect();
    GroundTruthMask::new(probs.height(), probs.width(), labels).expect("sizes come from the map")
}
