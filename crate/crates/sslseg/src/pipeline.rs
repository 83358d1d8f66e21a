//! The cyclical pseudo-labelling pipeline.
//!
//! Cycle 0 trains a U-Net and a U-Net++ on hand labels. Every later cycle
//! pseudo-labels the unlabeled pool with the previous ensemble, keeps the
//! confident tiles, and trains a fresh U-Net, a fresh U-Net++ and a
//! fine-tuned copy of the previous U-Net on the merged set. The loop stops
//! when the ensemble's validation IoU gains less than `plateau_delta`.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sslseg_core::crf::CrfParams;
use sslseg_core::data::{DatasetIndex, GroundTruthMask, LabeledExample};
use sslseg_core::ensemble::{EnsembleModel, ProbabilityMap};
use sslseg_core::metrics::IouCounts;
use sslseg_core::model::{build_model, UNet, Variant};
use sslseg_core::pseudo::{assimilate, filter_decision, hard_labels, ConfidenceFilterConfig, FilterDecision, Prediction};
use sslseg_core::rng;
use sslseg_core::train::{argmax_mask, train_model, TrainHistory};

use crate::checkpoint::save_checkpoint;
use crate::config::{ExperimentConfig, Schedule};
use crate::dataset::{check_no_leakage, hand_labelled, load_or_generate, Splits};
use crate::error::{IoContext, Result};
use crate::parallel::{crf_refine_batch, member_predictions};
use crate::store::{write_json, write_mask_png};

pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub model: UNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub name: String,
    pub val_iou: f64,
    pub final_train_loss: Option<f64>,
}

/// One row of the pseudo-label audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub tile_id: String,
    pub confident_fraction: f64,
    pub kept: bool,
}

impl From<&FilterDecision> for FilterRow {
    fn from(d: &FilterDecision) -> Self {
        Self { tile_id: d.tile_id.clone(), confident_fraction: d.confident_fraction(), kept: d.kept }
    }
}

/// Wall-clock seconds per stage; not part of the reproducible metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub pseudo_label_s: f64,
    pub train_s: f64,
    pub validate_s: f64,
    pub crf_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub cycle: usize,
    pub train_examples: usize,
    pub low_tier_examples: usize,
    pub members: Vec<MemberReport>,
    pub ensemble_val_iou: f64,
    /// Present when CRF refinement is enabled.
    pub ensemble_val_iou_crf: Option<f64>,
    /// Pool tiles scored by the previous ensemble to build this cycle's set.
    pub pseudo_generated: usize,
    pub pseudo_kept: usize,
    pub filter_audit: Vec<FilterRow>,
    pub warnings: Vec<String>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub cycles: Vec<IterationReport>,
    pub stop_reason: String,
}

/// A finished run: the report, the last ensemble and its validation masks.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub models: Vec<NamedModel>,
    pub val_masks: Vec<(String, GroundTruthMask)>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub members: Vec<f64>,
    pub ensemble_iou: f64,
    pub crf_iou: Option<f64>,
    pub ensemble_maps: Vec<ProbabilityMap>,
    /// Final masks: CRF-refined when refinement ran, else ensemble argmax.
    pub masks: Vec<GroundTruthMask>,
    pub crf_seconds: f64,
}

pub fn ensemble_of(models: &[NamedModel]) -> Result<EnsembleModel<&UNet>> {
    Ok(EnsembleModel::new(models.iter().map(|m| &m.model).collect())?)
}

fn iou_of(masks: &[GroundTruthMask], data: &DatasetIndex) -> Result<f64> {
    let mut c = IouCounts::default();
    for (m, e) in masks.iter().zip(data.examples()) {
        c.add(m, e.mask())?;
    }
    Ok(c.iou())
}

/// Member, ensemble and (optionally) CRF-refined IoU on `data`.
pub fn evaluate_ensemble(
    models: &[NamedModel],
    data: &DatasetIndex,
    use_tta: bool,
    crf: Option<&CrfParams>,
    workers: usize,
) -> Result<Evaluation> {
    let ensemble = ensemble_of(models)?;
    let images: Vec<_> = data.examples().iter().map(|e| e.image()).collect();
    let per_tile = member_predictions(&ensemble, &images, use_tta, workers)?;
    let members = (0..models.len())
        .map(|k| {
            let masks: Vec<_> = per_tile.iter().map(|maps| argmax_mask(&maps[k])).collect();
            iou_of(&masks, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let ensemble_maps = per_tile.iter().map(|maps| ProbabilityMap::mean(maps)).collect::<sslseg_core::Result<Vec<_>>>()?;
    let plain: Vec<_> = ensemble_maps.iter().map(argmax_mask).collect();
    let ensemble_iou = iou_of(&plain, data)?;
    let (crf_iou, masks, crf_seconds) = match crf {
        Some(params) => {
            let t = Instant::now();
            let preds = data
                .examples()
                .iter()
                .zip(&ensemble_maps)
                .map(|(e, m)| Prediction::from_probs(e.id(), m.clone()))
                .collect::<sslseg_core::Result<Vec<_>>>()?;
            let refined = crf_refine_batch(&preds, &images, params, workers)?;
            let masks: Vec<_> = refined.into_iter().map(|r| r.labels).collect();
            (Some(iou_of(&masks, data)?), masks, t.elapsed().as_secs_f64())
        }
        None => (None, plain, 0.0),
    };
    Ok(Evaluation { members, ensemble_iou, crf_iou, ensemble_maps, masks, crf_seconds })
}

/// Scores every pool tile with the ensemble and returns the filter
/// decisions plus the kept tiles with their hard pseudo-labels.
pub fn pseudo_label(
    models: &[NamedModel],
    pool: &DatasetIndex,
    filter: &ConfidenceFilterConfig,
    use_tta: bool,
    workers: usize,
) -> Result<(Vec<FilterDecision>, Vec<(Arc<LabeledExample>, GroundTruthMask)>)> {
    let ensemble = ensemble_of(models)?;
    let images: Vec<_> = pool.examples().iter().map(|e| e.image()).collect();
    let per_tile = member_predictions(&ensemble, &images, use_tta, workers)?;
    let mut decisions = Vec::with_capacity(pool.len());
    let mut kept = Vec::new();
    for (ex, maps) in pool.examples().iter().zip(per_tile) {
        let pred = Prediction::from_probs(ex.id(), ProbabilityMap::mean(&maps)?)?;
        let d = filter_decision(&pred, filter, Some(ex.valid()))?;
        if d.kept {
            kept.push((ex.clone(), hard_labels(&pred)));
        }
        decisions.push(d);
    }
    Ok((decisions, kept))
}

fn model_seed(cfg: &ExperimentConfig, cycle: usize, member: usize) -> u64 {
    rng::derive(cfg.seed, &[0x30DE, cycle as u64, member as u64])
}

fn train_seed(cfg: &ExperimentConfig, cycle: usize, member: usize) -> u64 {
    rng::derive(cfg.seed, &[0x7A1, cycle as u64, member as u64])
}

fn fresh(cfg: &ExperimentConfig, variant: Variant, cycle: usize, member: usize) -> Result<UNet> {
    Ok(build_model(&cfg.model.unet(variant), model_seed(cfg, cycle, member))?)
}

fn train_one(
    cfg: &ExperimentConfig,
    model: &mut UNet,
    data: &DatasetIndex,
    epochs: usize,
    schedule: Schedule,
    cycle: usize,
    member: usize,
) -> Result<TrainHistory> {
    let tc = cfg.train_config(epochs, schedule, cfg.augment.core(), train_seed(cfg, cycle, member));
    Ok(train_model(model, data, &tc, &cfg.loss.core())?)
}

/// Cycle 0: U-Net and U-Net++ from scratch on hand labels.
pub fn train_initial(cfg: &ExperimentConfig, train: &DatasetIndex) -> Result<(Vec<NamedModel>, Vec<TrainHistory>)> {
    let mut models = Vec::new();
    let mut hist = Vec::new();
    for (k, (name, variant)) in [("unet", Variant::UNet), ("unetpp", Variant::UNetPlusPlus)].into_iter().enumerate() {
        let mut m = fresh(cfg, variant, 0, k)?;
        hist.push(train_one(cfg, &mut m, train, cfg.train.epochs_initial, Schedule::Constant, 0, k)?);
        models.push(NamedModel { name: name.into(), model: m });
    }
    Ok((models, hist))
}

/// Cycle `n ≥ 1`: fresh U-Net and U-Net++ plus a fine-tuned `carry`.
pub fn train_cycle(
    cfg: &ExperimentConfig,
    train: &DatasetIndex,
    carry: &UNet,
    cycle: usize,
) -> Result<(Vec<NamedModel>, Vec<TrainHistory>)> {
    let epochs = cfg.train.epochs_cycle;
    let schedule = cfg.train.lr_schedule_cycle;
    let mut unet = fresh(cfg, Variant::UNet, cycle, 0)?;
    let h0 = train_one(cfg, &mut unet, train, epochs, schedule, cycle, 0)?;
    let mut unetpp = fresh(cfg, Variant::UNetPlusPlus, cycle, 1)?;
    let h1 = train_one(cfg, &mut unetpp, train, epochs, schedule, cycle, 1)?;
    let mut tuned = carry.clone();
    let h2 = train_one(cfg, &mut tuned, train, epochs, Schedule::Cosine, cycle, 2)?;
    let models = vec![
        NamedModel { name: "unet".into(), model: unet },
        NamedModel { name: "unetpp".into(), model: unetpp },
        NamedModel { name: "unet-finetuned".into(), model: tuned },
    ];
    Ok((models, vec![h0, h1, h2]))
}

fn checkpoint_models(out: Option<&Path>, cycle: usize, models: &[NamedModel]) -> Result<()> {
    if let Some(out) = out {
        for m in models {
            save_checkpoint(&m.model, &out.join("checkpoints").join(format!("cycle{cycle}")).join(format!("{}.ckpt", m.name)))?;
        }
    }
    Ok(())
}

fn report_for(
    cycle: usize,
    train: &DatasetIndex,
    models: &[NamedModel],
    hist: &[TrainHistory],
    eval: &Evaluation,
    pseudo: (&[FilterDecision], usize),
    warnings: Vec<String>,
    timings: StageTimings,
) -> IterationReport {
    IterationReport {
        cycle,
        train_examples: train.len(),
        low_tier_examples: train.count_tier(sslseg_core::data::ConfidenceTier::Low),
        members: models
            .iter()
            .zip(&eval.members)
            .zip(hist)
            .map(|((m, iou), h)| MemberReport { name: m.name.clone(), val_iou: *iou, final_train_loss: h.final_loss() })
            .collect(),
        ensemble_val_iou: eval.ensemble_iou,
        ensemble_val_iou_crf: eval.crf_iou,
        pseudo_generated: pseudo.0.len(),
        pseudo_kept: pseudo.1,
        filter_audit: pseudo.0.iter().map(FilterRow::from).collect(),
        warnings,
        timings,
    }
}

/// Runs the cycles on prepared splits. With `out`, checkpoints are written
/// after every cycle.
pub fn run_cycle_on(cfg: &ExperimentConfig, splits: &Splits, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let use_tta = cfg.train.use_tta;
    let crf = cfg.crf.enabled.then(|| cfg.crf.params());
    let high = hand_labelled(&splits.train)?;
    check_no_leakage(&high, &splits.val)?;

    let t = Instant::now();
    let (mut models, hist) = train_initial(cfg, &high)?;
    let train_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let mut eval = evaluate_ensemble(&models, &splits.val, use_tta, crf.as_ref(), cfg.workers)?;
    let timings = StageTimings { train_s, validate_s: t.elapsed().as_secs_f64() - eval.crf_seconds, crf_s: eval.crf_seconds, ..Default::default() };
    checkpoint_models(out, 0, &models)?;
    let mut cycles = vec![report_for(0, &high, &models, &hist, &eval, (&[], 0), Vec::new(), timings)];
    log::info!("cycle 0: ensemble val IoU {:.4}", eval.ensemble_iou);

    let mut carry = models[0].model.clone();
    let mut stop_reason = format!("reached max_cycles = {}", cfg.train.max_cycles);
    let mut train = high.clone();
    for cycle in 1..=cfg.train.max_cycles {
        let t = Instant::now();
        let (decisions, kept) = pseudo_label(&models, &splits.pool, &cfg.filter.core(), use_tta, cfg.workers)?;
        let pseudo_label_s = t.elapsed().as_secs_f64();
        let mut warnings = Vec::new();
        if kept.is_empty() {
            let w = format!("cycle {cycle}: no pseudo-label passed the filter; training on hand labels only");
            log::warn!("{w}");
            warnings.push(w);
        }
        train = assimilate(&train, &kept)?;
        check_no_leakage(&train, &splits.val)?;

        let t = Instant::now();
        let (next, hist) = train_cycle(cfg, &train, &carry, cycle)?;
        let train_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let next_eval = evaluate_ensemble(&next, &splits.val, use_tta, crf.as_ref(), cfg.workers)?;
        let timings = StageTimings {
            pseudo_label_s,
            train_s,
            validate_s: t.elapsed().as_secs_f64() - next_eval.crf_seconds,
            crf_s: next_eval.crf_seconds,
        };
        checkpoint_models(out, cycle, &next)?;
        cycles.push(report_for(cycle, &train, &next, &hist, &next_eval, (&decisions, kept.len()), warnings, timings));
        log::info!("cycle {cycle}: kept {}/{} pseudo-labels, ensemble val IoU {:.4}", kept.len(), decisions.len(), next_eval.ensemble_iou);

        let gain = next_eval.ensemble_iou - eval.ensemble_iou;
        carry = next[2].model.clone();
        models = next;
        eval = next_eval;
        if gain < cfg.train.plateau_delta {
            stop_reason = format!("plateau at cycle {cycle}: IoU gain {gain:.6} < {}", cfg.train.plateau_delta);
            break;
        }
    }
    let val_masks = splits.val.ids().map(String::from).zip(eval.masks).collect();
    Ok(RunOutcome { report: RunReport { config: cfg.clone(), cycles, stop_reason }, models, val_masks })
}

/// Loads or generates the data, runs the cycles and writes the report,
/// resolved config, checkpoints and final validation masks under `out`.
pub fn run_cycle(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    let data = load_or_generate(cfg)?;
    let splits = data.splits(cfg.data.min_valid_fraction)?;
    if let Some(out) = out {
        write_resolved_config(out, cfg)?;
    }
    let outcome = run_cycle_on(cfg, &splits, out)?;
    if let Some(out) = out {
        write_json(&out.join(REPORT_FILE), &outcome.report)?;
        write_masks(&out.join("masks"), &outcome.val_masks)?;
    }
    Ok(outcome.report)
}

pub fn write_resolved_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(out).at(out)?;
    let path = out.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.to_toml()).at(&path)
}

pub fn write_masks(dir: &Path, masks: &[(String, GroundTruthMask)]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    for (id, m) in masks {
        write_mask_png(&dir.join(format!("{id}.png")), m)?;
    }
    Ok(())
}
