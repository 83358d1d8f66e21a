use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Conv weight `(out, in, k, k)` with He-normal init scaled by `gain`.
    pub fn add_conv(
        &mut self,
        name: &str,
        out_ch: usize,
        in_per_group: usize,
        k: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> (ParamId, ParamId) {
        let fan_in = (in_per_group * k * k) as f64;
        let std = libm::sqrt(gain / fan_in);
        let w: Vec<f32> = (0..out_ch * in_per_group * k * k).map(|_| (rng::normal(rng) * std) as f32).collect();
        let w = Tensor::from_vec([out_ch, in_per_group, k, k], w).expect("sized above");
        let wid = self.add(alloc::format!("{name}.weight"), w);
        let bid = self.add(alloc::format!("{name}.bias"), Tensor::zeros([1, out_ch, 1, 1]));
        (wid, bid)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.data().len()).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; names and shapes must
    /// match exactly and in order.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            bail!(Shape, "expected {} parameter tensors, got {}", self.values.len(), entries.len());
        }
        for (i, (name, t)) in entries.iter().enumerate() {
            if *name != self.names[i] {
                bail!(Shape, "parameter {} is named {:?}, expected {:?}", i, name, self.names[i]);
            }
            if t.shape() != self.values[i].shape() {
                bail!(Shape, "parameter {:?} has shape {:?}, expected {:?}", name, t.shape(), self.values[i].shape());
            }
        }
        for (slot, (_, t)) in self.values.iter_mut().zip(entries) {
            *slot = t;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.values.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub(crate) Vec<Tensor>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub(crate) fn slot(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, s: f32) {
        for t in &mut self.0 {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}
