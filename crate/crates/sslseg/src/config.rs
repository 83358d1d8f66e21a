//! Experiment configuration: one TOML document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sslseg_core::augment::AugmentConfig;
use sslseg_core::crf::CrfParams;
use sslseg_core::loss::LossConfig;
use sslseg_core::model::{UNetConfig, Variant};
use sslseg_core::nn::AdamConfig;
use sslseg_core::pseudo::ConfidenceFilterConfig;
use sslseg_core::synth::RegionProfile;
use sslseg_core::train::{ScheduleKind, TrainConfig};

use crate::error::{Error, IoContext, Result};

pub const ENV_WORKERS: &str = "SSLSEG_NUM_WORKERS";
pub const ENV_SEED: &str = "SSLSEG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for inference and CRF refinement.
    pub workers: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossSection,
    pub filter: FilterSection,
    pub crf: CrfSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub student: StudentSection,
    pub benchmark: BenchmarkSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossSection::default(),
            filter: FilterSection::default(),
            crf: CrfSection::default(),
            train: TrainSection::default(),
            augment: AugmentSection::default(),
            student: StudentSection::default(),
            benchmark: BenchmarkSection::default(),
        }
    }
}

/// Where tiles come from: a dataset directory, or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub tile_size: usize,
    pub train_tiles: usize,
    pub pool_tiles: usize,
    pub val_tiles: usize,
    pub flood_proportion: f64,
    pub speckle_looks: u32,
    pub swath_gap_rate: f64,
    pub train_region: String,
    pub pool_region: String,
    pub val_region: String,
    pub min_valid_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            tile_size: 64,
            train_tiles: 32,
            pool_tiles: 128,
            val_tiles: 32,
            flood_proportion: 0.5,
            speckle_looks: 4,
            swath_gap_rate: 0.05,
            train_region: "region-a".into(),
            pool_region: "region-b".into(),
            val_region: "region-c".into(),
            min_valid_fraction: sslseg_core::data::DEFAULT_MIN_VALID_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub pointwise_heavy: bool,
    pub expansion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = UNetConfig::default();
        Self { encoder_widths: d.encoder_widths, pointwise_heavy: d.pointwise_heavy, expansion: d.expansion }
    }
}

impl ModelConfig {
    pub fn unet(&self, variant: Variant) -> UNetConfig {
        UNetConfig {
            variant,
            encoder_widths: self.encoder_widths.clone(),
            pointwise_heavy: self.pointwise_heavy,
            expansion: self.expansion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub dice_eps: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub distill_alpha: f64,
    pub temperature: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            dice_eps: d.dice_eps,
            focal_gamma: d.focal_gamma,
            focal_alpha: d.focal_alpha,
            dice_weight: d.dice_weight,
            focal_weight: d.focal_weight,
            distill_alpha: d.distill_alpha,
            temperature: d.temperature,
        }
    }
}

impl LossSection {
    pub fn core(&self) -> LossConfig {
        LossConfig {
            dice_eps: self.dice_eps,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
            dice_weight: self.dice_weight,
            focal_weight: self.focal_weight,
            distill_alpha: self.distill_alpha,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub c: f64,
    pub p: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        let d = ConfidenceFilterConfig::default();
        Self { c: d.c, p: d.p }
    }
}

impl FilterSection {
    pub fn core(&self) -> ConfidenceFilterConfig {
        ConfidenceFilterConfig { c: self.c, p: self.p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfSection {
    pub enabled: bool,
    pub iterations: usize,
    pub smoothness_weight: f64,
    pub smoothness_sigma: f64,
    pub appearance_weight: f64,
    /// Defaults to `80 · h / 256` when absent.
    pub appearance_sigma_xy: Option<f64>,
    pub appearance_sigma_rgb: f64,
}

impl Default for CrfSection {
    fn default() -> Self {
        let d = CrfParams::default();
        Self {
            enabled: true,
            iterations: d.iterations,
            smoothness_weight: d.smoothness_weight,
            smoothness_sigma: d.smoothness_sigma,
            appearance_weight: d.appearance_weight,
            appearance_sigma_xy: d.appearance_sigma_xy,
            appearance_sigma_rgb: d.appearance_sigma_rgb,
        }
    }
}

impl CrfSection {
    pub fn params(&self) -> CrfParams {
        CrfParams {
            iterations: self.iterations,
            smoothness_weight: self.smoothness_weight,
            smoothness_sigma: self.smoothness_sigma,
            appearance_weight: self.appearance_weight,
            appearance_sigma_xy: self.appearance_sigma_xy,
            appearance_sigma_rgb: self.appearance_sigma_rgb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl From<Schedule> for ScheduleKind {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Constant => ScheduleKind::Constant,
            Schedule::Cosine => ScheduleKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs_initial: usize,
    pub epochs_cycle: usize,
    pub lr_schedule_cycle: Schedule,
    pub max_cycles: usize,
    /// Smallest ensemble validation IoU gain that keeps the cycles going.
    pub plateau_delta: f64,
    pub use_tta: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs_initial: 15,
            epochs_cycle: 20,
            lr_schedule_cycle: Schedule::Cosine,
            max_cycles: 3,
            plateau_delta: 0.002,
            use_tta: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    pub elastic_prob: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub noise_std: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        Self {
            flip_prob: d.flip_prob,
            rotate_prob: d.rotate_prob,
            elastic_prob: d.elastic_prob,
            elastic_alpha: d.elastic_alpha,
            elastic_sigma: d.elastic_sigma,
            noise_std: d.noise_std,
        }
    }
}

impl AugmentSection {
    pub fn core(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            rotate_prob: self.rotate_prob,
            elastic_prob: self.elastic_prob,
            elastic_alpha: self.elastic_alpha,
            elastic_sigma: self.elastic_sigma,
            noise_std: self.noise_std,
        }
    }
}

/// Student training of the teacher-student variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub epochs: usize,
    /// Input noise of the strong augmentation.
    pub noise_std: f64,
    pub elastic_prob: f64,
    /// Directory holding `unet.ckpt` and `unetpp.ckpt` of the teacher.
    pub teacher_dir: Option<PathBuf>,
}

impl Default for StudentSection {
    fn default() -> Self {
        let strong = AugmentConfig::strong();
        Self { epochs: 20, noise_std: strong.noise_std, elastic_prob: strong.elastic_prob, teacher_dir: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub tiles: usize,
    pub repetitions: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self { tiles: 32, repetitions: 3 }
    }
}

fn region(name: &str, key: &str) -> Result<RegionProfile> {
    RegionProfile::by_name(name).ok_or_else(|| Error::Config(format!("data.{key}: unknown region {name:?}")))
}

impl ExperimentConfig {
    /// Reads, parses and validates a config file. Relative paths inside it
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.dir, &mut cfg.student.teacher_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    /// Applies `SSLSEG_NUM_WORKERS` and `SSLSEG_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(std::env::var(ENV_WORKERS).ok().as_deref(), std::env::var(ENV_SEED).ok().as_deref())
    }

    pub fn apply_overrides(&mut self, workers: Option<&str>, seed: Option<&str>) -> Result<()> {
        if let Some(w) = workers {
            self.workers = w.trim().parse().map_err(|_| Error::Config(format!("{ENV_WORKERS}: not a count: {w:?}")))?;
        }
        if let Some(s) = seed {
            self.seed = s.trim().parse().map_err(|_| Error::Config(format!("{ENV_SEED}: not a seed: {s:?}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        let d = &self.data;
        if d.tile_size == 0 || d.train_tiles == 0 || d.val_tiles == 0 {
            return Err(Error::Config("data.tile_size, data.train_tiles and data.val_tiles must be positive".into()));
        }
        if !(0.0..=1.0).contains(&d.min_valid_fraction) {
            return Err(Error::Config(format!("data.min_valid_fraction must lie in [0, 1], got {}", d.min_valid_fraction)));
        }
        region(&d.train_region, "train_region")?;
        region(&d.pool_region, "pool_region")?;
        region(&d.val_region, "val_region")?;
        self.model.unet(Variant::UNet).validate()?;
        self.loss.core().validate()?;
        self.filter.core().validate()?;
        self.crf.params().validate()?;
        self.augment.core().validate()?;
        self.student_augment().validate()?;
        let t = &self.train;
        if t.epochs_initial == 0 || t.epochs_cycle == 0 || self.student.epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if !(t.plateau_delta >= 0.0) {
            return Err(Error::Config(format!("train.plateau_delta must be >= 0, got {}", t.plateau_delta)));
        }
        self.train_config(t.epochs_initial, Schedule::Constant, self.augment.core(), 0).validate()?;
        if self.benchmark.tiles == 0 {
            return Err(Error::Config("benchmark.tiles must be positive".into()));
        }
        Ok(())
    }

    pub fn region(&self, which: &str) -> Result<RegionProfile> {
        match which {
            "train" => region(&self.data.train_region, "train_region"),
            "pool" => region(&self.data.pool_region, "pool_region"),
            _ => region(&self.data.val_region, "val_region"),
        }
    }

    pub fn student_augment(&self) -> AugmentConfig {
        AugmentConfig { noise_std: self.student.noise_std, elastic_prob: self.student.elastic_prob, ..self.augment.core() }
    }

    pub fn train_config(&self, epochs: usize, schedule: Schedule, augment: AugmentConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig { lr: self.train.lr, weight_decay: self.train.weight_decay, ..AdamConfig::default() },
            schedule: schedule.into(),
            augment,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[train]\nbatch_sise = 4\n").unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            "[train]\nbatch_size = 1",
            "[train]\nplateau_delta = -0.1",
            "[filter]\nc = 1.0",
            "[data]\nval_region = \"mars\"",
            "[model]\nencoder_widths = []",
            "[crf]\nsmoothness_sigma = 0.0",
            "workers = 0",
        ] {
            assert!(ExperimentConfig::from_toml(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(Some("4"), Some("99")).unwrap();
        assert_eq!((cfg.workers, cfg.seed), (4, 99));
        assert!(cfg.apply_overrides(Some("many"), None).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 5\n[train]\nmax_cycles = 1\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.max_cycles, 1);
        assert_eq!(cfg.train.batch_size, 16);
    }
}
