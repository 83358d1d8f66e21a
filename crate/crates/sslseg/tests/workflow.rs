use std::sync::Arc;

use sslseg::checkpoint::{load_checkpoint, save_checkpoint};
use sslseg::config::ExperimentConfig;
use sslseg::dataset::{generate_experiment_data, hand_labelled};
use sslseg::Error;
use sslseg_core::data::ConfidenceTier;
use sslseg_core::model::{build_model, Variant};
use sslseg_core::pseudo::assimilate;
use sslseg::config::Schedule;
use sslseg_core::train::train_model;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.tile_size = 32;
    cfg.data.train_tiles = 8;
    cfg.data.pool_tiles = 8;
    cfg.data.val_tiles = 4;
    cfg.model.encoder_widths = vec![8, 16, 32];
    cfg.train.batch_size = 4;
    cfg
}

#[test]
fn fine_tuning_a_reloaded_checkpoint_matches_the_original() {
    let cfg = tiny();
    let splits = generate_experiment_data(&cfg).unwrap().splits(cfg.data.min_valid_fraction).unwrap();
    let train = hand_labelled(&splits.train).unwrap();
    let mut original = build_model(&cfg.model.unet(Variant::UNet), 5).unwrap();
    let tcfg = cfg.train_config(1, Schedule::Constant, cfg.augment.core(), 1);
    train_model(&mut original, &train, &tcfg, &cfg.loss.core()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("unet.ckpt");
    save_checkpoint(&original, &path).unwrap();
    let mut reloaded = load_checkpoint(&path).unwrap();

    let fine = cfg.train_config(2, Schedule::Cosine, cfg.augment.core(), 2);
    let a = train_model(&mut original, &train, &fine, &cfg.loss.core()).unwrap();
    let b = train_model(&mut reloaded, &train, &fine, &cfg.loss.core()).unwrap();
    assert_eq!(a.step_losses[0].to_bits(), b.step_losses[0].to_bits());
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn assimilating_a_hand_labelled_id_is_rejected() {
    let cfg = tiny();
    let splits = generate_experiment_data(&cfg).unwrap().splits(cfg.data.min_valid_fraction).unwrap();
    let train = hand_labelled(&splits.train).unwrap();
    let clash = train.examples()[0].clone();
    let relabelled = Arc::new(clash.relabel(clash.mask().clone(), ConfidenceTier::Low).unwrap());
    let err = assimilate(&train, &[(relabelled, clash.mask().clone())]).unwrap_err();
    assert!(matches!(Error::from(err), Error::Core(sslseg_core::Error::Assimilation(_))));
}

#[test]
fn validation_tiles_never_reach_training() {
    let cfg = tiny();
    let splits = generate_experiment_data(&cfg).unwrap().splits(cfg.data.min_valid_fraction).unwrap();
    for id in splits.val.ids() {
        assert!(!splits.train.contains_id(id));
        assert!(!splits.pool.contains_id(id));
    }
}
