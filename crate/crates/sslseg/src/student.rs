//! Teacher-student distillation: a frozen U-Net + U-Net++ teacher labels the
//! training and pool tiles, and a single U-Net student learns from hand
//! labels (dice) and teacher distributions (KL) under strong augmentation.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sslseg_core::data::{ConfidenceTier, DatasetIndex, Split};
use sslseg_core::ensemble::ProbabilityMap;
use sslseg_core::model::{build_model, UNet, Variant};
use sslseg_core::rng;
use sslseg_core::train::{argmax_mask, train_student};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, Schedule};
use crate::dataset::{hand_labelled, load_or_generate, Splits};
use crate::error::{Error, Result};
use crate::parallel::member_predictions;
use crate::pipeline::{ensemble_of, evaluate_ensemble, write_resolved_config, NamedModel};
use crate::store::write_json;

pub const STUDENT_REPORT: &str = "student_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTimings {
    pub teacher_s: f64,
    pub train_s: f64,
    pub validate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentReport {
    pub config: ExperimentConfig,
    pub teacher_val_iou: f64,
    pub student_val_iou: f64,
    pub student_val_iou_crf: Option<f64>,
    pub labeled_examples: usize,
    pub unlabeled_examples: usize,
    pub epoch_losses: Vec<f64>,
    pub timings: StudentTimings,
}

/// Loads `unet.ckpt` and `unetpp.ckpt` from `dir`.
pub fn load_teacher(dir: &Path) -> Result<Vec<NamedModel>> {
    ["unet", "unetpp"]
        .iter()
        .map(|name| {
            let path = dir.join(format!("{name}.ckpt"));
            if !path.is_file() {
                return Err(Error::Config(format!("teacher checkpoint {} does not exist", path.display())));
            }
            Ok(NamedModel { name: (*name).into(), model: load_checkpoint(&path)? })
        })
        .collect()
}

/// Training set for the student (hand labels plus teacher-labelled pool
/// tiles) with the aligned teacher distributions.
pub fn student_data(
    teacher: &[NamedModel],
    splits: &Splits,
    use_tta: bool,
    workers: usize,
) -> Result<(DatasetIndex, Vec<ProbabilityMap>)> {
    let ensemble = ensemble_of(teacher)?;
    let high = hand_labelled(&splits.train)?;
    let mut examples: Vec<_> = high.examples().to_vec();
    examples.extend(splits.pool.examples().iter().cloned());
    let images: Vec<_> = examples.iter().map(|e| e.image()).collect();
    let maps = member_predictions(&ensemble, &images, use_tta, workers)?
        .iter()
        .map(|m| ProbabilityMap::mean(m))
        .collect::<sslseg_core::Result<Vec<_>>>()?;
    let relabelled = examples
        .iter()
        .zip(&maps)
        .map(|(e, m)| {
            if e.tier() == ConfidenceTier::High && high.contains_id(e.id()) {
                Ok(e.clone())
            } else {
                Ok(Arc::new(e.relabel(argmax_mask(m), ConfidenceTier::Low)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((DatasetIndex::new(Split::Train, relabelled)?, maps))
}

/// Trains and evaluates a student against `teacher`.
pub fn noisy_student_on(cfg: &ExperimentConfig, splits: &Splits, teacher: &[NamedModel]) -> Result<(StudentReport, UNet)> {
    cfg.validate()?;
    let use_tta = cfg.train.use_tta;
    let crf = cfg.crf.enabled.then(|| cfg.crf.params());
    let t = Instant::now();
    let (data, maps) = student_data(teacher, splits, use_tta, cfg.workers)?;
    let teacher_eval = evaluate_ensemble(teacher, &splits.val, use_tta, None, cfg.workers)?;
    let teacher_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut student = build_model(&cfg.model.unet(Variant::UNet), rng::derive(cfg.seed, &[0x57D, 0]))?;
    let tc = cfg.train_config(cfg.student.epochs, Schedule::Constant, cfg.student_augment(), rng::derive(cfg.seed, &[0x57D, 1]));
    let hist = train_student(&mut student, &data, &maps, &tc, &cfg.loss.core())?;
    let train_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let named = [NamedModel { name: "student".into(), model: student }];
    let eval = evaluate_ensemble(&named, &splits.val, use_tta, crf.as_ref(), cfg.workers)?;
    let [NamedModel { model: student, .. }] = named;
    let report = StudentReport {
        config: cfg.clone(),
        teacher_val_iou: teacher_eval.ensemble_iou,
        student_val_iou: eval.ensemble_iou,
        student_val_iou_crf: eval.crf_iou,
        labeled_examples: data.count_tier(ConfidenceTier::High),
        unlabeled_examples: data.count_tier(ConfidenceTier::Low),
        epoch_losses: hist.epoch_losses,
        timings: StudentTimings { teacher_s, train_s, validate_s: t.elapsed().as_secs_f64() },
    };
    Ok((report, student))
}

/// Loads the teacher from `teacher_dir` (or `student.teacher_dir`), trains
/// the student and writes its report and checkpoint under `out`.
pub fn noisy_student_run(cfg: &ExperimentConfig, teacher_dir: Option<&Path>, out: Option<&Path>) -> Result<StudentReport> {
    let dir = teacher_dir
        .or(cfg.student.teacher_dir.as_deref())
        .ok_or_else(|| Error::Config("no teacher checkpoint directory given (student.teacher_dir)".into()))?;
    let teacher = load_teacher(dir)?;
    let data = load_or_generate(cfg)?;
    let splits = data.splits(cfg.data.min_valid_fraction)?;
    if let Some(out) = out {
        write_resolved_config(out, cfg)?;
    }
    let (report, student) = noisy_student_on(cfg, &splits, &teacher)?;
    if let Some(out) = out {
        write_json(&out.join(STUDENT_REPORT), &report)?;
        save_checkpoint(&student, &out.join("checkpoints").join("student.ckpt"))?;
    }
    Ok(report)
}
