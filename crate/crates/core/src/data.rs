//! Tiles, composites, masks and dataset indices.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Raw two-polarization backscatter tile plus its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePair {
    height: usize,
    width: usize,
    vv: Vec<f32>,
    vh: Vec<f32>,
    valid: Vec<bool>,
}

impl TilePair {
    /// Invalid pixels are forced to zero in both channels.
    pub fn new(height: usize, width: usize, mut vv: Vec<f32>, mut vh: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if vv.len() != n || vh.len() != n || valid.len() != n {
            bail!(
                Shape,
                "tile {}x{} expects {} pixels, got vv={} vh={} valid={}",
                height,
                width,
                n,
                vv.len(),
                vh.len(),
                valid.len()
            );
        }
        for i in 0..n {
            let (a, b) = (vv[i], vh[i]);
            if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
                bail!(Validation, "pixel {} has non-finite or negative backscatter ({}, {})", i, a, b);
            }
            if !valid[i] {
                vv[i] = 0.0;
                vh[i] = 0.0;
            }
        }
        Ok(Self { height, width, vv, vh, valid })
    }

    pub fn fully_valid(height: usize, width: usize, vv: Vec<f32>, vh: Vec<f32>) -> Result<Self> {
        Self::new(height, width, vv, vh, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vv(&self) -> &[f32] {
        &self.vv
    }

    pub fn vh(&self) -> &[f32] {
        &self.vh
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// Dataset-level affine ranges used to bring each composite channel into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeScaling {
    pub vv: (f32, f32),
    pub vh: (f32, f32),
    pub ratio: (f32, f32),
}

impl Default for CompositeScaling {
    fn default() -> Self {
        Self { vv: (0.0, 1.0), vh: (0.0, 1.0), ratio: (0.0, 16.0) }
    }
}

impl CompositeScaling {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("vv", self.vv), ("vh", self.vh), ("ratio", self.ratio)] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                bail!(Config, "scaling range for {} must satisfy lo < hi, got ({}, {})", name, lo, hi);
            }
        }
        Ok(())
    }
}

pub const RATIO_EPS: f32 = 1e-6;

/// Three-channel composite stored planar (`[red | green | blue]`, each `h*w`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl CompositeImage {
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            bail!(Shape, "composite {}x{} needs {} values, got {}", height, width, 3 * height * width, data.len());
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Validation, "composite value {} outside [0, 1]", v);
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// RGB triple at pixel `i` (row-major).
    pub fn pixel(&self, i: usize) -> [f32; 3] {
        let n = self.height * self.width;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

fn rescale(v: f32, (lo, hi): (f32, f32)) -> f32 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Red = VV, green = VH, blue = VV / (VH + eps), each rescaled with the
/// dataset-level ranges and clipped. Invalid pixels are zero in all channels.
pub fn compose_rgb(tile: &TilePair, scaling: &CompositeScaling) -> Result<CompositeImage> {
    scaling.validate()?;
    let n = tile.height * tile.width;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        if !tile.valid[i] {
            continue;
        }
        let (vv, vh) = (tile.vv[i], tile.vh[i]);
        data[i] = rescale(vv, scaling.vv);
        data[n + i] = rescale(vh, scaling.vh);
        data[2 * n + i] = rescale(vv / (vh + RATIO_EPS), scaling.ratio);
    }
    Ok(CompositeImage { height: tile.height, width: tile.width, data })
}

pub fn valid_fraction(tile: &TilePair) -> f64 {
    let n = tile.valid.len();
    if n == 0 {
        return 0.0;
    }
    tile.valid.iter().filter(|v| **v).count() as f64 / n as f64
}

/// Binary flood mask: 0 = not flooded, 1 = flooded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            bail!(Shape, "mask {}x{} needs {} labels, got {}", height, width, height * width, labels.len());
        }
        if let Some(v) = labels.iter().find(|v| **v > 1) {
            bail!(Validation, "mask label {} is not binary", v);
        }
        Ok(Self { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn any_flooded(&self) -> bool {
        self.labels.iter().any(|v| *v == 1)
    }

    pub fn flooded_count(&self) -> usize {
        self.labels.iter().filter(|v| **v == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConfidenceTier {
    /// Hand label.
    High,
    /// Filtered pseudo-label.
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A composite with its mask and provenance. `flood_present` and the tier are
/// fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    id: String,
    image: CompositeImage,
    mask: GroundTruthMask,
    valid: Vec<bool>,
    tier: ConfidenceTier,
    region: String,
    flood_present: bool,
}

impl LabeledExample {
    pub fn new(
        id: impl Into<String>,
        image: CompositeImage,
        mask: GroundTruthMask,
        valid: Vec<bool>,
        tier: ConfidenceTier,
        region: impl Into<String>,
    ) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        if mask.height() != h || mask.width() != w || valid.len() != h * w {
            bail!(
                Shape,
                "example image {}x{}, mask {}x{}, validity {} pixels",
                h,
                w,
                mask.height(),
                mask.width(),
                valid.len()
            );
        }
        let flood_present = mask.any_flooded();
        Ok(Self { id: id.into(), image, mask, valid, tier, region: region.into(), flood_present })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &CompositeImage {
        &self.image
    }

    pub fn mask(&self) -> &GroundTruthMask {
        &self.mask
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len() as f64
    }

    pub fn tier(&self) -> ConfidenceTier {
        self.tier
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn flood_present(&self) -> bool {
        self.flood_present
    }

    /// Same image and provenance with a different mask (used for pseudo-labels).
    pub fn relabel(&self, mask: GroundTruthMask, tier: ConfidenceTier) -> Result<Self> {
        Self::new(self.id.clone(), self.image.clone(), mask, self.valid.clone(), tier, self.region.clone())
    }
}

/// Ordered, duplicate-free collection of shared examples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    split: Split,
    examples: Vec<Arc<LabeledExample>>,
}

impl DatasetIndex {
    pub fn new(split: Split, examples: Vec<Arc<LabeledExample>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &examples {
            if !seen.insert(e.id()) {
                bail!(Validation, "duplicate tile id {:?} in {} index", e.id(), split.as_str());
            }
        }
        Ok(Self { split, examples })
    }

    pub fn empty(split: Split) -> Self {
        Self { split, examples: Vec::new() }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn examples(&self) -> &[Arc<LabeledExample>] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id())
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.examples.iter().any(|e| e.id() == id)
    }

    pub fn flood_present_count(&self) -> usize {
        self.examples.iter().filter(|e| e.flood_present()).count()
    }

    pub fn count_tier(&self, tier: ConfidenceTier) -> usize {
        self.examples.iter().filter(|e| e.tier() == tier).count()
    }
}

pub const DEFAULT_MIN_VALID_FRACTION: f64 = 0.005;

/// Drops examples whose observed fraction is strictly below `min_fraction`.
pub fn filter_swath_gaps(index: &DatasetIndex, min_fraction: f64) -> Result<DatasetIndex> {
    if !(0.0..=1.0).contains(&min_fraction) {
        bail!(Config, "min_fraction must lie in [0, 1], got {}", min_fraction);
    }
    let kept = index.examples.iter().filter(|e| e.valid_fraction() >= min_fraction).cloned().collect();
    Ok(DatasetIndex { split: index.split, examples: kept })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile_with_valid(h: usize, w: usize, valid_count: usize) -> TilePair {
        let n = h * w;
        let valid: Vec<bool> = (0..n).map(|i| i < valid_count).collect();
        TilePair::new(h, w, vec![0.5; n], vec![0.1; n], valid).unwrap()
    }

    fn example_with_valid(id: &str, h: usize, w: usize, valid_count: usize) -> Arc<LabeledExample> {
        let tile = tile_with_valid(h, w, valid_count);
        let img = compose_rgb(&tile, &CompositeScaling::default()).unwrap();
        Arc::new(
            LabeledExample::new(id, img, GroundTruthMask::zeros(h, w), tile.valid().to_vec(), ConfidenceTier::High, "r")
                .unwrap(),
        )
    }

    #[test]
    fn constant_equal_polarizations() {
        let k = 0.37f32;
        let tile = TilePair::fully_valid(4, 4, vec![k; 16], vec![k; 16]).unwrap();
        let img = compose_rgb(&tile, &CompositeScaling::default()).unwrap();
        assert_eq!(img.channel(0), img.channel(1));
        let b0 = img.channel(2)[0];
        assert!(img.channel(2).iter().all(|v| *v == b0));
        let expected = (k / (k + RATIO_EPS)) / 16.0;
        assert!((b0 - expected).abs() < 1e-7);
    }

    #[test]
    fn all_invalid_tile_composes_to_zero() {
        let tile = TilePair::new(3, 3, vec![0.4; 9], vec![0.2; 9], vec![false; 9]).unwrap();
        let img = compose_rgb(&tile, &CompositeScaling::default()).unwrap();
        assert!(img.planar().iter().all(|v| *v == 0.0));
        assert_eq!(tile.vv(), &[0.0; 9]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        assert!(matches!(
            TilePair::new(2, 2, vec![0.0; 4], vec![0.0; 3], vec![true; 4]),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn valid_fraction_cases() {
        assert_eq!(valid_fraction(&tile_with_valid(4, 4, 16)), 1.0);
        assert_eq!(valid_fraction(&tile_with_valid(4, 4, 0)), 0.0);
        let f = valid_fraction(&tile_with_valid(256, 256, 262));
        assert_eq!(f, 262.0 / 65536.0);
        assert!((f - 0.003998).abs() < 1e-6);
    }

    #[test]
    fn swath_gap_threshold_is_strict() {
        // 20x20 = 400 pixels: 2 valid = 0.005 exactly, 1 valid = 0.0025
        let idx = DatasetIndex::new(
            Split::Train,
            vec![
                example_with_valid("full", 20, 20, 400),
                example_with_valid("boundary", 20, 20, 2),
                example_with_valid("below", 20, 20, 1),
            ],
        )
        .unwrap();
        let f = filter_swath_gaps(&idx, DEFAULT_MIN_VALID_FRACTION).unwrap();
        let ids: Vec<&str> = f.ids().collect();
        assert_eq!(ids, ["full", "boundary"]);
        assert_eq!(idx.len(), 3, "input index must be untouched");
    }

    #[test]
    fn four_tenths_percent_is_excluded() {
        // 250 pixels, 1 valid = 0.004
        let idx = DatasetIndex::new(Split::Train, vec![example_with_valid("gap", 10, 25, 1)]).unwrap();
        assert!(filter_swath_gaps(&idx, DEFAULT_MIN_VALID_FRACTION).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = example_with_valid("a", 2, 2, 4);
        assert!(DatasetIndex::new(Split::Val, vec![a.clone(), a]).is_err());
    }

    #[test]
    fn flood_flag_follows_mask() {
        let tile = tile_with_valid(2, 2, 4);
        let img = compose_rgb(&tile, &CompositeScaling::default()).unwrap();
        let mask = GroundTruthMask::new(2, 2, vec![0, 0, 1, 0]).unwrap();
        let e = LabeledExample::new("x", img, mask, vec![true; 4], ConfidenceTier::Low, "r").unwrap();
        assert!(e.flood_present());
        let e2 = e.relabel(GroundTruthMask::zeros(2, 2), ConfidenceTier::Low).unwrap();
        assert!(!e2.flood_present());
        assert_eq!(e2.tier(), ConfidenceTier::Low);
        assert!(GroundTruthMask::new(1, 1, vec![2]).is_err());
    }
}
