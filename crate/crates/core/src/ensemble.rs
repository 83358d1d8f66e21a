//! Probability maps, D4 test-time augmentation and mean-of-members ensembles.

use alloc::vec;
use alloc::vec::Vec;

use crate::d4::D4Element;
use crate::data::CompositeImage;
use crate::error::{bail, Result};
use crate::model::{SegmentationModel, INPUT_CHANNELS, NUM_CLASSES};
use crate::tensor::Tensor;

/// Per-pixel class distribution, planar `(2, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Two-class softmax of one pixel's logits.
pub fn softmax2(z0: f64, z1: f64) -> (f64, f64) {
    let m = z0.max(z1);
    let e0 = libm::exp(z0 - m);
    let e1 = libm::exp(z1 - m);
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != NUM_CLASSES * height * width {
            bail!(Shape, "probability map {}x{} needs {} values, got {}", height, width, 2 * height * width, data.len());
        }
        Ok(Self { height, width, data })
    }

    /// Checks per-pixel simplex membership within `tol`.
    pub fn validate_simplex(&self, tol: f64) -> Result<()> {
        let n = self.height * self.width;
        for i in 0..n {
            let (a, b) = (self.data[i], self.data[n + i]);
            if !(a.is_finite() && b.is_finite()) || a < -tol || b < -tol || (a + b - 1.0).abs() > tol {
                bail!(Validation, "pixel {} is not a distribution: ({}, {})", i, a, b);
            }
        }
        Ok(())
    }

    /// Softmax of one `(2, h, w)` logit sample.
    pub fn from_logits(height: usize, width: usize, logits: &[f32]) -> Result<Self> {
        let n = height * width;
        if logits.len() != NUM_CLASSES * n {
            bail!(Shape, "logits hold {} values, expected {}", logits.len(), 2 * n);
        }
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            let (p0, p1) = softmax2(logits[i] as f64, logits[n + i] as f64);
            data[i] = p0;
            data[n + i] = p1;
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn class(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn flooded(&self) -> &[f64] {
        self.class(1)
    }

    /// Log-probabilities usable as logits (softmax(ln p) = p).
    pub fn log_probs(&self, floor: f64) -> Vec<f64> {
        self.data.iter().map(|p| libm::log(p.max(floor))).collect()
    }

    /// Elementwise mean of maps summed in the given order.
    pub fn mean(maps: &[ProbabilityMap]) -> Result<Self> {
        let Some(first) = maps.first() else { bail!(Validation, "cannot average zero probability maps") };
        let mut acc = vec![0.0; first.data.len()];
        for m in maps {
            if m.height != first.height || m.width != first.width {
                bail!(Shape, "member map {}x{} vs {}x{}", m.height, m.width, first.height, first.width);
            }
            for (a, v) in acc.iter_mut().zip(&m.data) {
                *a += *v;
            }
        }
        let k = maps.len() as f64;
        acc.iter_mut().for_each(|v| *v /= k);
        Ok(Self { height: first.height, width: first.width, data: acc })
    }

    pub fn apply_d4(&self, g: D4Element) -> Result<Self> {
        let data = g.apply_planes(&self.data, self.height, self.width)?;
        let (h, w) = if g.swaps_axes() { (self.width, self.height) } else { (self.height, self.width) };
        Ok(Self { height: h, width: w, data })
    }
}

pub fn image_tensor(images: &[&CompositeImage]) -> Result<Tensor> {
    let Some(first) = images.first() else { bail!(Validation, "empty image batch") };
    let planes: Vec<&[f32]> = images.iter().map(|i| i.planar()).collect();
    Tensor::stack(&planes, INPUT_CHANNELS, first.height(), first.width())
}

/// Softmax of the model output for each image, one forward pass per image.
pub fn predict_plain<M: SegmentationModel + ?Sized>(model: &M, image: &CompositeImage) -> Result<ProbabilityMap> {
    let logits = model.forward(&image_tensor(&[image])?)?;
    check_logits(&logits, 1, image.height(), image.width())?;
    ProbabilityMap::from_logits(image.height(), image.width(), logits.sample(0))
}

fn check_logits(logits: &Tensor, batch: usize, h: usize, w: usize) -> Result<()> {
    if logits.shape() != [batch, NUM_CLASSES, h, w] {
        bail!(Shape, "model returned {:?}, expected {:?}", logits.shape(), [batch, NUM_CLASSES, h, w]);
    }
    Ok(())
}

/// Mean over all eight D4 elements of `g⁻¹(softmax(model(g(x))))`.
pub fn tta_predict<M: SegmentationModel + ?Sized>(model: &M, image: &CompositeImage) -> Result<ProbabilityMap> {
    let (h, w) = (image.height(), image.width());
    if h != w {
        bail!(Shape, "test-time augmentation needs square tiles, got {}x{}", h, w);
    }
    let mut batch = Vec::with_capacity(8 * INPUT_CHANNELS * h * w);
    for g in D4Element::ALL {
        batch.extend(g.apply_planes(image.planar(), h, w)?);
    }
    let logits = model.forward(&Tensor::from_vec([8, INPUT_CHANNELS, h, w], batch)?)?;
    check_logits(&logits, 8, h, w)?;
    let mut maps = Vec::with_capacity(8);
    for (k, g) in D4Element::ALL.iter().enumerate() {
        let probs = ProbabilityMap::from_logits(h, w, logits.sample(k))?;
        maps.push(probs.apply_d4(g.inverse())?);
    }
    ProbabilityMap::mean(&maps)
}

pub fn predict<M: SegmentationModel + ?Sized>(model: &M, image: &CompositeImage, use_tta: bool) -> Result<ProbabilityMap> {
    if use_tta {
        tta_predict(model, image)
    } else {
        predict_plain(model, image)
    }
}

/// Members whose probability maps are averaged.
#[derive(Debug, Clone)]
pub struct EnsembleModel<M> {
    members: Vec<M>,
}

impl<M: SegmentationModel> EnsembleModel<M> {
    pub fn new(members: Vec<M>) -> Result<Self> {
        if members.is_empty() {
            bail!(Config, "an ensemble needs at least one member");
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[M] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_predictions(&self, image: &CompositeImage, use_tta: bool) -> Result<Vec<ProbabilityMap>> {
        self.members.iter().map(|m| predict(m, image, use_tta)).collect()
    }
}

/// Mean over members (in member order) of their plain or TTA predictions.
pub fn ensemble_predict<M: SegmentationModel>(
    ensemble: &EnsembleModel<M>,
    image: &CompositeImage,
    use_tta: bool,
) -> Result<ProbabilityMap> {
    ProbabilityMap::mean(&ensemble.member_predictions(image, use_tta)?)
}
