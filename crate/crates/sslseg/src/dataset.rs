//! Train / unlabeled pool / validation tiles for an experiment.

use std::collections::HashSet;
use std::path::Path;

use sslseg_core::data::{CompositeScaling, ConfidenceTier, DatasetIndex, Split};
use sslseg_core::rng;
use sslseg_core::synth::{default_scaling, generate_tiles, GeneratorSpec};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::store::{index_of, read_dataset, StoredTile};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub scaling: CompositeScaling,
    pub tiles: Vec<StoredTile>,
}

/// Hand-labelled training tiles, the unlabeled pool and the validation set.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: DatasetIndex,
    pub pool: DatasetIndex,
    pub val: DatasetIndex,
}

fn generate_split(cfg: &ExperimentConfig, split: Split, count: usize, which: &str, tag: u64) -> Result<Vec<StoredTile>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let region = cfg.region(which)?;
    let spec = GeneratorSpec {
        tile_size: cfg.data.tile_size,
        tile_count: count,
        flood_proportion: cfg.data.flood_proportion,
        speckle_looks: cfg.data.speckle_looks,
        swath_gap_rate: cfg.data.swath_gap_rate,
        region: region.clone(),
        split,
        id_prefix: format!("{which}-"),
        scaling: default_scaling(),
    };
    let tiles = generate_tiles(&spec, rng::derive(cfg.seed, &[0xDA7A, tag]))?;
    Ok(tiles
        .into_iter()
        .map(|t| StoredTile {
            id: t.id,
            split,
            region: region.name.clone(),
            tier: ConfidenceTier::High,
            tile: t.tile,
            mask: t.mask,
        })
        .collect())
}

/// Synthetic tiles for every split, from the config's generator settings.
pub fn generate_experiment_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let mut tiles = generate_split(cfg, Split::Train, cfg.data.train_tiles, "train", 1)?;
    tiles.extend(generate_split(cfg, Split::Test, cfg.data.pool_tiles, "pool", 2)?);
    tiles.extend(generate_split(cfg, Split::Val, cfg.data.val_tiles, "val", 3)?);
    Ok(ExperimentData { scaling: default_scaling(), tiles })
}

/// Reads `data.dir` when configured, otherwise generates.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    match &cfg.data.dir {
        Some(dir) => load(dir),
        None => generate_experiment_data(cfg),
    }
}

pub fn load(dir: &Path) -> Result<ExperimentData> {
    let (scaling, tiles) = read_dataset(dir)?;
    Ok(ExperimentData { scaling, tiles })
}

impl ExperimentData {
    /// Swath-gap tiles are dropped from the training set and the pool; the
    /// validation set is kept whole.
    pub fn splits(&self, min_valid_fraction: f64) -> Result<Splits> {
        let splits = Splits {
            train: index_of(&self.tiles, Split::Train, &self.scaling, Some(min_valid_fraction))?,
            pool: index_of(&self.tiles, Split::Test, &self.scaling, Some(min_valid_fraction))?,
            val: index_of(&self.tiles, Split::Val, &self.scaling, None)?,
        };
        if splits.val.is_empty() {
            return Err(Error::Config("the dataset has no validation tiles".into()));
        }
        check_no_leakage(&splits.train, &splits.val)?;
        check_no_leakage(&splits.pool, &splits.val)?;
        Ok(splits)
    }
}

/// Fails when a training tile id also appears in the validation set.
pub fn check_no_leakage(train: &DatasetIndex, val: &DatasetIndex) -> Result<()> {
    let val_ids: HashSet<&str> = val.ids().collect();
    if let Some(id) = train.ids().find(|id| val_ids.contains(id)) {
        return Err(sslseg_core::Error::Validation(format!("tile {id:?} is in both the training and validation sets")).into());
    }
    Ok(())
}

/// High-tier examples only.
pub fn hand_labelled(index: &DatasetIndex) -> Result<DatasetIndex> {
    let ex = index.examples().iter().filter(|e| e.tier() == ConfidenceTier::High).cloned().collect();
    Ok(DatasetIndex::new(index.split(), ex)?)
}
