//! Files, checkpoints, orchestration and the command line around
//! [`sslseg_core`].

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod parallel;
pub mod pipeline;
pub mod store;
pub mod student;

pub use error::{Error, Result};
