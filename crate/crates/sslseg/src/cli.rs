//! The `sslseg` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sslseg_core::data::{ConfidenceTier, Split};
use sslseg_core::ensemble::ProbabilityMap;
use sslseg_core::metrics::IouCounts;
use sslseg_core::pseudo::{assimilate, Prediction};
use sslseg_core::train::argmax_mask;

use crate::bench::benchmark_inference;
use crate::checkpoint::{load_checkpoint_dir, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::{generate_experiment_data, hand_labelled, load_or_generate};
use crate::error::{Error, IoContext, Result};
use crate::parallel::{crf_refine_batch, member_predictions};
use crate::pipeline::{
    ensemble_of, evaluate_ensemble, pseudo_label, run_cycle, train_initial, write_masks, write_resolved_config,
    FilterRow, NamedModel,
};
use crate::store::{read_json, read_mask_png, read_probs, write_dataset, write_json, write_probs, StoredTile};
use crate::student::noisy_student_run;

#[derive(Debug, Parser)]
#[command(name = "sslseg", version, about = "Semi-supervised flood segmentation with pseudo-label cycles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "sslseg-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Dataset directory, replacing `data.dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Upper bound on pseudo-label cycles after the first.
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub no_tta: bool,
    #[arg(long)]
    pub no_crf: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its ground-truth PNG masks.
    GenerateData(Common),
    /// Train the U-Net / U-Net++ pair on hand labels.
    Train(Common),
    /// Score the unlabeled pool and keep confident pseudo-labels.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Merge kept pseudo-labels into the training split.
    Assimilate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pseudo: PathBuf,
    },
    /// Run the full pseudo-label cycle.
    Cycle(Common),
    /// Distil a teacher ensemble into a single U-Net.
    NoisyStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Predict one split with a checkpoint ensemble.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Refine stored probability maps with the dense CRF.
    Crf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        probs: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Flooded-class IoU between two directories of PNG masks.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Per-tile latency of forward, TTA and CRF.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateData(c) | Command::Train(c) | Command::Cycle(c) => c,
            Command::PseudoLabel { common, .. }
            | Command::Assimilate { common, .. }
            | Command::NoisyStudent { common, .. }
            | Command::Infer { common, .. }
            | Command::Crf { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Benchmark { common, .. } => common,
        }
    }
}

/// Config file, then environment, then command-line flags.
pub fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    cfg.apply_env()?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(d) = &c.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(n) = c.cycles {
        cfg.train.max_cycles = n;
    }
    if c.no_tta {
        cfg.train.use_tta = false;
    }
    if c.no_crf {
        cfg.crf.enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| Error::Config(format!("--split: unknown split {s:?} (train, val or test)")))
}

fn named(models: Vec<(String, sslseg_core::model::UNet)>) -> Vec<NamedModel> {
    models.into_iter().map(|(name, model)| NamedModel { name, model }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub generated: usize,
    pub kept: usize,
    pub decisions: Vec<FilterRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tiles: usize,
    pub iou: f64,
    pub iou_crf: Option<f64>,
}

fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = generate_experiment_data(cfg)?;
    write_dataset(&out.join("data"), &data.scaling, &data.tiles)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let masks: Vec<_> =
            data.tiles.iter().filter(|t| t.split == split).map(|t| (t.id.clone(), t.mask.clone())).collect();
        write_masks(&out.join("gt").join(split.as_str()), &masks)?;
    }
    println!("wrote {} tiles to {}", data.tiles.len(), out.join("data").display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let splits = load_or_generate(cfg)?.splits(cfg.data.min_valid_fraction)?;
    let high = hand_labelled(&splits.train)?;
    let (models, _) = train_initial(cfg, &high)?;
    for m in &models {
        save_checkpoint(&m.model, &out.join("checkpoints").join(format!("{}.ckpt", m.name)))?;
    }
    let crf = cfg.crf.enabled.then(|| cfg.crf.params());
    let eval = evaluate_ensemble(&models, &splits.val, cfg.train.use_tta, crf.as_ref(), cfg.workers)?;
    let report = EvalReport { tiles: splits.val.len(), iou: eval.ensemble_iou, iou_crf: eval.crf_iou };
    write_json(&out.join("train_report.json"), &report)?;
    println!("ensemble val IoU {:.6}", eval.ensemble_iou);
    Ok(())
}

fn pseudo(cfg: &ExperimentConfig, out: &Path, checkpoints: &Path) -> Result<()> {
    let models = named(load_checkpoint_dir(checkpoints)?);
    let splits = load_or_generate(cfg)?.splits(cfg.data.min_valid_fraction)?;
    let (decisions, kept) = pseudo_label(&models, &splits.pool, &cfg.filter.core(), cfg.train.use_tta, cfg.workers)?;
    let dir = out.join("pseudo");
    let masks: Vec<_> = kept.iter().map(|(e, m)| (e.id().to_string(), m.clone())).collect();
    write_masks(&dir, &masks)?;
    let report = PseudoLabelReport { generated: decisions.len(), kept: kept.len(), decisions: decisions.iter().map(FilterRow::from).collect() };
    write_json(&dir.join("decisions.json"), &report)?;
    println!("kept {} of {} pool tiles", report.kept, report.generated);
    Ok(())
}

fn assimilate_cmd(cfg: &ExperimentConfig, out: &Path, pseudo_dir: &Path) -> Result<()> {
    let data = load_or_generate(cfg)?;
    let report: PseudoLabelReport = read_json(&pseudo_dir.join("decisions.json"), "pseudo-label decisions")?;
    let mut tiles: Vec<StoredTile> =
        data.tiles.iter().filter(|t| !(t.split == Split::Train && t.tier == ConfidenceTier::Low)).cloned().collect();
    let train = hand_labelled(&crate::store::index_of(&tiles, Split::Train, &data.scaling, None)?)?;
    let mut kept = Vec::new();
    let mut added = Vec::new();
    for row in report.decisions.iter().filter(|r| r.kept) {
        let source = tiles
            .iter()
            .find(|t| t.split == Split::Test && t.id == row.tile_id)
            .ok_or_else(|| Error::Config(format!("pseudo-label for unknown pool tile {:?}", row.tile_id)))?;
        let mask = read_mask_png(&pseudo_dir.join(format!("{}.png", row.tile_id)))?;
        let tile = StoredTile { split: Split::Train, tier: ConfidenceTier::Low, mask: mask.clone(), ..source.clone() };
        kept.push((Arc::new(tile.example(&data.scaling)?), mask));
        added.push(tile);
    }
    let merged = assimilate(&train, &kept)?;
    tiles.extend(added);
    write_dataset(&out.join("data"), &data.scaling, &tiles)?;
    println!("training split now holds {} tiles ({} pseudo-labelled)", merged.len(), merged.count_tier(ConfidenceTier::Low));
    Ok(())
}

fn infer(cfg: &ExperimentConfig, out: &Path, checkpoints: &Path, split: Split) -> Result<()> {
    let models = named(load_checkpoint_dir(checkpoints)?);
    let data = load_or_generate(cfg)?;
    let index = crate::store::index_of(&data.tiles, split, &data.scaling, None)?;
    let ensemble = ensemble_of(&models)?;
    let images: Vec<_> = index.examples().iter().map(|e| e.image()).collect();
    let maps = member_predictions(&ensemble, &images, cfg.train.use_tta, cfg.workers)?
        .iter()
        .map(|m| ProbabilityMap::mean(m))
        .collect::<sslseg_core::Result<Vec<_>>>()?;
    let probs_dir = out.join("probs");
    std::fs::create_dir_all(&probs_dir).at(&probs_dir)?;
    for (e, m) in index.examples().iter().zip(&maps) {
        write_probs(&crate::store::raster_path(&probs_dir, "prob", e.id()), m)?;
    }
    let masks = if cfg.crf.enabled {
        let preds = index
            .examples()
            .iter()
            .zip(&maps)
            .map(|(e, m)| Prediction::from_probs(e.id(), m.clone()))
            .collect::<sslseg_core::Result<Vec<_>>>()?;
        crf_refine_batch(&preds, &images, &cfg.crf.params(), cfg.workers)?.into_iter().map(|r| r.labels).collect()
    } else {
        maps.iter().map(argmax_mask).collect::<Vec<_>>()
    };
    let named_masks: Vec<_> = index.ids().map(String::from).zip(masks).collect();
    write_masks(&out.join("masks"), &named_masks)?;
    println!("wrote {} masks to {}", named_masks.len(), out.join("masks").display());
    Ok(())
}

fn crf_cmd(cfg: &ExperimentConfig, out: &Path, probs_dir: &Path, split: Split) -> Result<()> {
    let data = load_or_generate(cfg)?;
    let index = crate::store::index_of(&data.tiles, split, &data.scaling, None)?;
    let preds = index
        .examples()
        .iter()
        .map(|e| Ok(Prediction::from_probs(e.id(), read_probs(&crate::store::raster_path(probs_dir, "prob", e.id()))?)?))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = index.examples().iter().map(|e| e.image()).collect();
    let refined = crf_refine_batch(&preds, &images, &cfg.crf.params(), cfg.workers)?;
    let masks: Vec<_> = refined.into_iter().map(|r| (r.tile_id, r.labels)).collect();
    write_masks(&out.join("crf_masks"), &masks)?;
    println!("refined {} tiles", masks.len());
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn evaluate(out: &Path, pred: &Path, gt: &Path) -> Result<f64> {
    let names = png_names(gt)?;
    if names.is_empty() {
        return Err(Error::Config(format!("no PNG masks in {}", gt.display())));
    }
    let mut counts = IouCounts::default();
    for n in &names {
        let p = pred.join(n);
        if !p.is_file() {
            return Err(Error::Config(format!("prediction {} is missing", p.display())));
        }
        counts.add(&read_mask_png(&p)?, &read_mask_png(&gt.join(n))?)?;
    }
    let iou = counts.iou();
    std::fs::create_dir_all(out).at(out)?;
    write_json(&out.join("evaluation.json"), &EvalReport { tiles: names.len(), iou, iou_crf: None })?;
    println!("IoU {iou:.6}");
    Ok(iou)
}

fn benchmark(cfg: &ExperimentConfig, out: &Path, checkpoints: Option<&Path>) -> Result<()> {
    let models = match checkpoints {
        Some(dir) => named(load_checkpoint_dir(dir)?),
        None => {
            let seed = |k| sslseg_core::rng::derive(cfg.seed, &[0xBE7C, k]);
            [(sslseg_core::model::Variant::UNet, "unet"), (sslseg_core::model::Variant::UNetPlusPlus, "unetpp")]
                .into_iter()
                .zip(0..)
                .map(|((v, name), k)| {
                    Ok(NamedModel { name: name.into(), model: sslseg_core::model::build_model(&cfg.model.unet(v), seed(k))? })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut bcfg = cfg.clone();
    bcfg.data.val_tiles = bcfg.data.val_tiles.max(cfg.benchmark.tiles);
    let data = load_or_generate(&bcfg)?;
    let val = crate::store::index_of(&data.tiles, Split::Val, &data.scaling, None)?;
    let images: Vec<_> = val.examples().iter().map(|e| e.image()).cycle().take(cfg.benchmark.tiles).collect();
    let crf = cfg.crf.enabled.then(|| cfg.crf.params());
    let report = benchmark_inference(&ensemble_of(&models)?, &images, cfg.train.use_tta, crf.as_ref(), cfg.benchmark.repetitions)?;
    write_json(&out.join("benchmark.json"), &report)?;
    println!("{:<8} {:>12} {:>12}", "stage", "median ms", "p95 ms");
    for s in &report.stages {
        println!("{:<8} {:>12.3} {:>12.3}", s.stage, s.median_ms, s.p95_ms);
    }
    Ok(())
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = resolve_config(common)?;
    let out = common.out.as_path();
    write_resolved_config(out, &cfg)?;
    match &cli.command {
        Command::GenerateData(_) => generate(&cfg, out),
        Command::Train(_) => train(&cfg, out),
        Command::PseudoLabel { checkpoints, .. } => pseudo(&cfg, out, checkpoints),
        Command::Assimilate { pseudo: dir, .. } => assimilate_cmd(&cfg, out, dir),
        Command::Cycle(_) => {
            let report = run_cycle(&cfg, Some(out))?;
            for c in &report.cycles {
                println!(
                    "cycle {}: ensemble val IoU {:.6}{}; pseudo-labels kept {}/{}",
                    c.cycle,
                    c.ensemble_val_iou,
                    c.ensemble_val_iou_crf.map(|v| format!(" (CRF {v:.6})")).unwrap_or_default(),
                    c.pseudo_kept,
                    c.pseudo_generated
                );
            }
            println!("{}", report.stop_reason);
            Ok(())
        }
        Command::NoisyStudent { teacher, .. } => {
            let r = noisy_student_run(&cfg, teacher.as_deref(), Some(out))?;
            println!("teacher val IoU {:.6}, student val IoU {:.6}", r.teacher_val_iou, r.student_val_iou);
            Ok(())
        }
        Command::Infer { checkpoints, split, .. } => infer(&cfg, out, checkpoints, parse_split(split)?),
        Command::Crf { probs, split, .. } => crf_cmd(&cfg, out, probs, parse_split(split)?),
        Command::Evaluate { pred, gt, .. } => evaluate(out, pred, gt).map(|_| ()),
        Command::Benchmark { checkpoints, .. } => benchmark(&cfg, out, checkpoints.as_deref()),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
