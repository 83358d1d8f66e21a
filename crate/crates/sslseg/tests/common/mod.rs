#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
seed = 7
workers = 1

[data]
tile_size = 32
train_tiles = 12
pool_tiles = 16
val_tiles = 8

[model]
encoder_widths = [8, 16, 32]

[train]
batch_size = 4
epochs_initial = 3
epochs_cycle = 3
max_cycles = 1

[crf]
iterations = 2

[student]
epochs = 2

[benchmark]
tiles = 4
repetitions = 3
"#;

pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).unwrap();
    p
}

pub fn sslseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslseg"))
        .args(args)
        .env_remove("SSLSEG_NUM_WORKERS")
        .env_remove("SSLSEG_SEED")
        .output()
        .expect("spawn sslseg")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
