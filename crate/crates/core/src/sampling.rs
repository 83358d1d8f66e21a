//! Flood-stratified mini-batches.
//!
//! Each batch holds at least `ceil(B/2)` flood-present tiles. Positives are
//! drawn from a shuffled stream that is reshuffled whenever it runs dry, so
//! they are oversampled when rare. The remaining slots come from a shuffled
//! stream over the whole index.

use alloc::vec::Vec;

use crate::data::DatasetIndex;
use crate::error::{bail, Result};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub min_flood_per_batch: usize,
}

impl BatchPlan {
    pub fn steps(&self) -> usize {
        self.batches.len()
    }
}

/// Number of optimizer steps per epoch: `ceil(n / B)`.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(items: Vec<usize>, rng: &mut SeededRng) -> Self {
        let mut c = Self { items, pos: 0 };
        rng::shuffle(rng, &mut c.items);
        c
    }

    fn next(&mut self, rng: &mut SeededRng) -> usize {
        if self.pos == self.items.len() {
            rng::shuffle(rng, &mut self.items);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

/// One epoch of stratified batches. Indices refer to `index.examples()`.
pub fn stratified_batches(index: &DatasetIndex, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size < 2 {
        bail!(Config, "stratified batches need batch_size >= 2, got {}", batch_size);
    }
    if index.is_empty() {
        bail!(Stratification, "cannot stratify an empty dataset");
    }
    let positives: Vec<usize> = (0..index.len()).filter(|&i| index.get(i).flood_present()).collect();
    if positives.is_empty() {
        bail!(Stratification, "no flood-present tiles among {} examples", index.len());
    }
    let quota = batch_size.div_ceil(2);
    let mut rng = rng::stream(seed, &[0x5A3B]);
    let mut pos = Cycler::new(positives, &mut rng);
    let mut all = Cycler::new((0..index.len()).collect(), &mut rng);
    let batches = (0..steps_per_epoch(index.len(), batch_size))
        .map(|_| {
            let mut batch: Vec<usize> = (0..quota).map(|_| pos.next(&mut rng)).collect();
            batch.extend((quota..batch_size).map(|_| all.next(&mut rng)));
            rng::shuffle(&mut rng, &mut batch);
            batch
        })
        .collect();
    Ok(BatchPlan { batches, batch_size, min_flood_per_batch: quota })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CompositeImage, ConfidenceTier, GroundTruthMask, LabeledExample, Split};
    use alloc::format;
    use alloc::sync::Arc;
    use alloc::vec;

    fn index(n: usize, flooded: usize) -> DatasetIndex {
        let ex = (0..n)
            .map(|i| {
                let img = CompositeImage::from_planar(2, 2, vec![0.1; 12]).unwrap();
                let mask = GroundTruthMask::new(2, 2, vec![u8::from(i < flooded), 0, 0, 0]).unwrap();
                Arc::new(LabeledExample::new(format!("e{i}"), img, mask, vec![true; 4], ConfidenceTier::High, "r").unwrap())
            })
            .collect();
        DatasetIndex::new(Split::Train, ex).unwrap()
    }

    #[test]
    fn every_batch_meets_quota() {
        let idx = index(200, 10);
        for seed in 0..5 {
            let plan = stratified_batches(&idx, 8, seed).unwrap();
            assert_eq!(plan.steps(), 25);
            for b in &plan.batches {
                assert_eq!(b.len(), 8);
                assert!(b.iter().filter(|&&i| idx.get(i).flood_present()).count() >= 4);
            }
        }
    }

    #[test]
    fn odd_batch_size_quota_rounds_up() {
        let idx = index(30, 1);
        let plan = stratified_batches(&idx, 5, 3).unwrap();
        assert_eq!(plan.min_flood_per_batch, 3);
        assert_eq!(plan.steps(), 6);
        for b in &plan.batches {
            assert!(b.iter().filter(|&&i| i == 0).count() >= 3);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let idx = index(50, 20);
        assert_eq!(stratified_batches(&idx, 4, 9).unwrap(), stratified_batches(&idx, 4, 9).unwrap());
        assert_ne!(stratified_batches(&idx, 4, 9).unwrap(), stratified_batches(&idx, 4, 10).unwrap());
    }

    #[test]
    fn failure_modes() {
        assert!(matches!(stratified_batches(&index(10, 0), 4, 0), Err(crate::Error::Stratification(_))));
        assert!(matches!(
            stratified_batches(&DatasetIndex::empty(Split::Train), 4, 0),
            Err(crate::Error::Stratification(_))
        ));
        assert!(matches!(stratified_batches(&index(10, 3), 1, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn non_positive_slots_cover_the_index() {
        // 20 draws from the first pass over a 40-element permutation are distinct
        let idx = index(40, 4);
        let plan = stratified_batches(&idx, 4, 1).unwrap();
        let mut seen = vec![false; 40];
        plan.batches.iter().flatten().for_each(|&i| seen[i] = true);
        assert!(seen.iter().filter(|s| **s).count() >= 20);
    }
}
