//! Allocation-only core of the `sslseg` semi-supervised flood segmentation
//! pipeline.
//!
//! Everything in this crate is pure computation over in-memory buffers: tile
//! and composite types, a synthetic SAR-like tile generator, D4 symmetries and
//! test-time augmentation, stratified batching, a small reverse-mode autodiff
//! engine with U-Net / U-Net++ models, segmentation losses, confidence-filtered
//! pseudo-labeling, dense CRF refinement and the training loops. File formats,
//! configuration, parallel orchestration and the CLI live in the `sslseg`
//! companion crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod crf;
pub mod d4;
pub mod data;
pub mod ensemble;
mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pseudo;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
