//! Flooded-class intersection over union.

use crate::data::GroundTruthMask;
use crate::error::{bail, Result};

/// Confusion counts for the flooded class, accumulated across tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

impl IouCounts {
    pub fn add(&mut self, pred: &GroundTruthMask, gt: &GroundTruthMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            bail!(Shape, "prediction {}x{} vs ground truth {}x{}", pred.height(), pred.width(), gt.height(), gt.width());
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            match (p, g) {
                (1, 1) => self.true_positive += 1,
                (1, 0) => self.false_positive += 1,
                (0, 1) => self.false_negative += 1,
                _ => {}
            }
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or 1.0 when neither side has flooded pixels.
    pub fn iou(&self) -> f64 {
        let union = self.true_positive + self.false_positive + self.false_negative;
        if union == 0 {
            1.0
        } else {
            self.true_positive as f64 / union as f64
        }
    }
}

pub fn iou_flooded(pred: &GroundTruthMask, gt: &GroundTruthMask) -> Result<f64> {
    let mut c = IouCounts::default();
    c.add(pred, gt)?;
    Ok(c.iou())
}

/// IoU over all pixels of a set of `(prediction, ground truth)` pairs.
pub fn iou_over<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a GroundTruthMask, &'a GroundTruthMask)>,
{
    let mut c = IouCounts::default();
    for (p, g) in pairs {
        c.add(p, g)?;
    }
    Ok(c.iou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::d4::D4Element;

    fn m(labels: &[u8]) -> GroundTruthMask {
        GroundTruthMask::new(4, 4, labels.to_vec()).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = m(&[1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
        let b = m(&[0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(iou_flooded(&a, &a).unwrap(), 1.0);
        assert_eq!(iou_flooded(&a, &b).unwrap(), 0.0);
        assert_eq!(iou_flooded(&m(&[0; 16]), &m(&[0; 16])).unwrap(), 1.0);
    }

    #[test]
    fn counted_four_by_four() {
        // TP = 6, FP = 2, FN = 4
        let pred = m(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        let gt = m(&[1, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0]);
        let mut c = IouCounts::default();
        c.add(&pred, &gt).unwrap();
        assert_eq!((c.true_positive, c.false_positive, c.false_negative), (6, 2, 4));
        assert_eq!(c.iou(), 0.5);
        assert_eq!(iou_flooded(&gt, &pred).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch() {
        let a = GroundTruthMask::zeros(2, 2);
        let b = GroundTruthMask::zeros(2, 3);
        assert!(iou_flooded(&a, &b).is_err());
    }

    #[test]
    fn invariant_under_joint_d4() {
        let pred = m(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1]);
        let gt = m(&[1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1]);
        let base = iou_flooded(&pred, &gt).unwrap();
        for g in D4Element::ALL {
            let p = GroundTruthMask::new(4, 4, g.apply_plane(pred.labels(), 4, 4).unwrap()).unwrap();
            let t = GroundTruthMask::new(4, 4, g.apply_plane(gt.labels(), 4, 4).unwrap()).unwrap();
            assert_eq!(iou_flooded(&p, &t).unwrap(), base);
        }
    }
}
