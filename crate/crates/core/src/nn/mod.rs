//! A small reverse-mode autodiff engine specialised for convolutional
//! encoder-decoders on NCHW tensors.

mod graph;
mod kernels;
mod optim;
mod params;

pub use graph::{Graph, NodeId};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Gradients, ParamId, ParamStore};
