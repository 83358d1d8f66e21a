//! Confidence-filtered pseudo-labels.
//!
//! Per-pixel confidence is the maximum class probability. A tile is kept when
//! the number of pixels whose confidence is strictly above `c` is strictly
//! greater than `p · h · w`. Kept tiles are hard-labelled by argmax and merged
//! with the hand-labelled set.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::data::{ConfidenceTier, DatasetIndex, GroundTruthMask, LabeledExample};
use crate::ensemble::{softmax2, ProbabilityMap};
use crate::error::{bail, Result};

/// Per-pixel max of the two-class softmax of `(2, h·w)` logits.
pub fn pixel_confidence(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() % 2 != 0 {
        bail!(Shape, "two-class logits must have even length, got {}", logits.len());
    }
    if let Some(i) = logits.iter().position(|v| v.is_nan()) {
        bail!(Numeric, "NaN logit at index {}", i);
    }
    let n = logits.len() / 2;
    Ok((0..n)
        .map(|i| {
            let (a, b) = softmax2(logits[i], logits[n + i]);
            a.max(b)
        })
        .collect())
}

/// Class probabilities of one tile with their per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    tile_id: String,
    probs: ProbabilityMap,
    confidence: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(tile_id: impl Into<String>, height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != 2 * height * width {
            bail!(Shape, "logits hold {} values for a {}x{} tile", logits.len(), height, width);
        }
        let confidence = pixel_confidence(logits)?;
        let logits32: Vec<f32> = logits.iter().map(|v| *v as f32).collect();
        let mut probs = ProbabilityMap::from_logits(height, width, &logits32)?;
        // recompute in f64 so probs and confidence agree exactly
        let n = height * width;
        let mut data = probs.data().to_vec();
        for i in 0..n {
            let (a, b) = softmax2(logits[i], logits[n + i]);
            data[i] = a;
            data[n + i] = b;
        }
        probs = ProbabilityMap::new(height, width, data)?;
        Ok(Self { tile_id: tile_id.into(), probs, confidence })
    }

    /// From an already averaged distribution (ensemble / TTA output).
    pub fn from_probs(tile_id: impl Into<String>, probs: ProbabilityMap) -> Result<Self> {
        probs.validate_simplex(1e-6)?;
        let confidence = probs.class(0).iter().zip(probs.class(1)).map(|(a, b)| a.max(*b)).collect();
        Ok(Self { tile_id: tile_id.into(), probs, confidence })
    }

    pub fn tile_id(&self) -> &str {
        &self.tile_id
    }

    pub fn probs(&self) -> &ProbabilityMap {
        &self.probs
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn height(&self) -> usize {
        self.probs.height()
    }

    pub fn width(&self) -> usize {
        self.probs.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceFilterConfig {
    /// Per-pixel confidence threshold.
    pub c: f64,
    /// Required proportion of confident pixels.
    pub p: f64,
}

impl Default for ConfidenceFilterConfig {
    fn default() -> Self {
        Self { c: 0.9, p: 0.9 }
    }
}

impl ConfidenceFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c < 1.0) {
            bail!(Config, "confidence threshold c must lie in (0, 1), got {}", self.c);
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            bail!(Config, "pixel proportion p must lie in (0, 1), got {}", self.p);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub tile_id: String,
    pub kept: bool,
    pub confident_pixel_count: usize,
    /// Pixels taking part in the decision (observed pixels only).
    pub considered_pixels: usize,
    pub required_count: f64,
}

impl FilterDecision {
    pub fn confident_fraction(&self) -> f64 {
        if self.considered_pixels == 0 {
            0.0
        } else {
            self.confident_pixel_count as f64 / self.considered_pixels as f64
        }
    }
}

/// Keeps the tile iff `#{Ỹ > c} > p · (observed pixels)`. Pixels with
/// `valid[i] == false` are left out of both sides.
pub fn filter_decision(pred: &Prediction, cfg: &ConfidenceFilterConfig, valid: Option<&[bool]>) -> Result<FilterDecision> {
    cfg.validate()?;
    let n = pred.confidence.len();
    if let Some(v) = valid {
        if v.len() != n {
            bail!(Shape, "validity mask has {} pixels, prediction {}", v.len(), n);
        }
    }
    let observed = |i: usize| valid.map_or(true, |v| v[i]);
    let considered_pixels = (0..n).filter(|&i| observed(i)).count();
    let confident_pixel_count = (0..n).filter(|&i| observed(i) && pred.confidence[i] > cfg.c).count();
    let required_count = cfg.p * considered_pixels as f64;
    Ok(FilterDecision {
        tile_id: pred.tile_id.clone(),
        kept: confident_pixel_count as f64 > required_count,
        confident_pixel_count,
        considered_pixels,
        required_count,
    })
}

/// Per-pixel argmax; exact ties go to class 0.
pub fn hard_labels(pred: &Prediction) -> GroundTruthMask {
    let labels = pred.probs.class(0).iter().zip(pred.probs.class(1)).map(|(a, b)| u8::from(b > a)).collect();
    GroundTruthMask::new(pred.height(), pred.width(), labels).expect("sizes come from the prediction")
}

/// Hand labels of `train` plus `kept` pool tiles relabelled as low-confidence
/// examples. Low-confidence examples already in `train` are dropped.
pub fn assimilate(train: &DatasetIndex, kept: &[(Arc<LabeledExample>, GroundTruthMask)]) -> Result<DatasetIndex> {
    let mut examples: Vec<Arc<LabeledExample>> =
        train.examples().iter().filter(|e| e.tier() == ConfidenceTier::High).cloned().collect();
    for (source, mask) in kept {
        if examples.iter().any(|e| e.id() == source.id()) {
            bail!(Assimilation, "pseudo-labelled tile {:?} collides with a hand-labelled tile", source.id());
        }
        examples.push(Arc::new(source.relabel(mask.clone(), ConfidenceTier::Low)?));
    }
    DatasetIndex::new(train.split(), examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CompositeImage, Split};
    use alloc::format;
    use alloc::vec;

    fn pred_with_confidence(conf: &[f64]) -> Prediction {
        // flooded class probability = confidence
        let n = conf.len();
        let mut data = vec![0.0; 2 * n];
        for (i, c) in conf.iter().enumerate() {
            data[i] = 1.0 - c;
            data[n + i] = *c;
        }
        Prediction::from_probs("t", ProbabilityMap::new(1, n, data).unwrap()).unwrap()
    }

    #[test]
    fn confidence_spot_values() {
        let c = pixel_confidence(&[10.0, 0.0, 1.0, -10.0, 0.0, 0.0]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-6);
        assert_eq!(c[1], 0.5);
        let e = core::f64::consts::E;
        assert!((c[2] - e / (e + 1.0)).abs() < 1e-15);
        assert!((c[2] - 0.731059).abs() < 1e-6);
        assert!(matches!(pixel_confidence(&[f64::NAN, 0.0]), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn all_confident_tile_is_kept() {
        let d = filter_decision(&pred_with_confidence(&[0.95; 100]), &ConfidenceFilterConfig::default(), None).unwrap();
        assert!(d.kept);
        assert_eq!(d.confident_pixel_count, 100);
    }

    #[test]
    fn exactly_ninety_of_hundred_is_rejected() {
        let mut conf = vec![0.95; 90];
        conf.extend([0.6; 10]);
        let d = filter_decision(&pred_with_confidence(&conf), &ConfidenceFilterConfig::default(), None).unwrap();
        assert_eq!(d.confident_pixel_count, 90);
        assert!(!d.kept);
        conf[95] = 0.95;
        assert!(filter_decision(&pred_with_confidence(&conf), &ConfidenceFilterConfig::default(), None).unwrap().kept);
    }

    #[test]
    fn confidence_equal_to_threshold_is_not_confident() {
        let d = filter_decision(&pred_with_confidence(&[0.9; 10]), &ConfidenceFilterConfig { c: 0.9, p: 0.5 }, None).unwrap();
        assert_eq!(d.confident_pixel_count, 0);
    }

    #[test]
    fn invalid_pixels_are_excluded() {
        let mut conf = vec![0.99; 8];
        conf.extend([0.5; 2]);
        let mut valid = vec![true; 8];
        valid.extend([false; 2]);
        let cfg = ConfidenceFilterConfig::default();
        assert!(!filter_decision(&pred_with_confidence(&conf), &cfg, None).unwrap().kept);
        let d = filter_decision(&pred_with_confidence(&conf), &cfg, Some(&valid)).unwrap();
        assert!(d.kept);
        assert_eq!(d.considered_pixels, 8);
    }

    #[test]
    fn hard_label_cases() {
        let m = hard_labels(&pred_with_confidence(&[0.1, 0.9, 0.5]));
        assert_eq!(m.labels(), &[0, 1, 0]);
    }

    fn example(id: &str, tier: ConfidenceTier) -> Arc<LabeledExample> {
        let img = CompositeImage::from_planar(2, 2, vec![0.5; 12]).unwrap();
        Arc::new(LabeledExample::new(id, img, GroundTruthMask::zeros(2, 2), vec![true; 4], tier, "r").unwrap())
    }

    fn flooded() -> GroundTruthMask {
        GroundTruthMask::new(2, 2, vec![0, 1, 0, 0]).unwrap()
    }

    #[test]
    fn assimilation_counts_and_replacement() {
        let train = DatasetIndex::new(
            Split::Train,
            (0..100).map(|i| example(&format!("h{i}"), ConfidenceTier::High)).collect(),
        )
        .unwrap();
        assert_eq!(assimilate(&train, &[]).unwrap(), train);
        let first: Vec<_> = (0..40).map(|i| (example(&format!("p{i}"), ConfidenceTier::High), flooded())).collect();
        let once = assimilate(&train, &first).unwrap();
        assert_eq!(once.len(), 140);
        assert_eq!(once.count_tier(ConfidenceTier::Low), 40);
        assert!(once.examples().iter().filter(|e| e.tier() == ConfidenceTier::Low).all(|e| e.flood_present()));
        let second: Vec<_> = (0..5).map(|i| (example(&format!("q{i}"), ConfidenceTier::High), flooded())).collect();
        let twice = assimilate(&once, &second).unwrap();
        assert_eq!(twice.len(), 105);
        assert!(twice.examples().iter().filter(|e| e.tier() == ConfidenceTier::Low).all(|e| e.id().starts_with('q')));
        // hand labels preserved untouched
        for (a, b) in train.examples().iter().zip(twice.examples()) {
            assert!(Arc::ptr_eq(a, b));
        }
    }

    #[test]
    fn collision_with_hand_label_fails() {
        let train = DatasetIndex::new(Split::Train, vec![example("a", ConfidenceTier::High)]).unwrap();
        let kept = vec![(example("a", ConfidenceTier::High), flooded())];
        assert!(matches!(assimilate(&train, &kept), Err(crate::Error::Assimilation(_))));
    }
}
