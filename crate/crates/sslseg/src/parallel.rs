//! Order-preserving parallel maps over tiles on a fixed-size worker pool.

use rayon::prelude::*;
use sslseg_core::crf::{crf_refine, CrfParams, RefinedPrediction};
use sslseg_core::data::CompositeImage;
use sslseg_core::ensemble::{EnsembleModel, ProbabilityMap};
use sslseg_core::model::SegmentationModel;
use sslseg_core::pseudo::Prediction;

use crate::error::{Error, Result};

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("cannot start {workers} workers: {e}")))
}

/// Applies `f` to every item on `workers` threads; output order follows input order.
pub fn par_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    thread_pool(workers)?.install(|| items.par_iter().map(f).collect())
}

/// CRF refinement of many tiles. Each tile is refined independently, so the
/// results do not depend on `workers`.
pub fn crf_refine_batch(
    preds: &[Prediction],
    images: &[&CompositeImage],
    params: &CrfParams,
    workers: usize,
) -> Result<Vec<RefinedPrediction>> {
    if preds.len() != images.len() {
        return Err(sslseg_core::Error::Validation(format!("{} predictions for {} images", preds.len(), images.len())).into());
    }
    let pairs: Vec<(&Prediction, &CompositeImage)> = preds.iter().zip(images.iter().copied()).collect();
    par_map(&pairs, workers, |(p, img)| Ok(crf_refine(p.probs(), img, params)?.with_tile_id(p.tile_id())))
}

/// Per-member predictions for each image, `out[tile][member]`.
pub fn member_predictions<M>(
    ensemble: &EnsembleModel<M>,
    images: &[&CompositeImage],
    use_tta: bool,
    workers: usize,
) -> Result<Vec<Vec<ProbabilityMap>>>
where
    M: SegmentationModel + Sync,
{
    par_map(images, workers, |img| Ok(ensemble.member_predictions(img, use_tta)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(k: usize) -> (Prediction, CompositeImage) {
        let n = 36;
        let f: Vec<f64> = (0..n).map(|i| ((i * 7 + k * 3) % 11) as f64 / 10.0).collect();
        let mut d: Vec<f64> = f.iter().map(|p| 1.0 - p).collect();
        d.extend(&f);
        let p = Prediction::from_probs(format!("t{k}"), ProbabilityMap::new(6, 6, d).unwrap()).unwrap();
        let img = CompositeImage::from_planar(6, 6, (0..3 * n).map(|i| ((i + k) % 5) as f32 / 4.0).collect()).unwrap();
        (p, img)
    }

    #[test]
    fn batch_is_identical_across_worker_counts() {
        let (preds, images): (Vec<_>, Vec<_>) = (0..20).map(tile).unzip();
        let refs: Vec<&CompositeImage> = images.iter().collect();
        let one = crf_refine_batch(&preds, &refs, &CrfParams::default(), 1).unwrap();
        let eight = crf_refine_batch(&preds, &refs, &CrfParams::default(), 8).unwrap();
        assert_eq!(one, eight);
        assert_eq!(one[3].tile_id, "t3");
    }

    #[test]
    fn empty_and_mismatched() {
        assert!(crf_refine_batch(&[], &[], &CrfParams::default(), 4).unwrap().is_empty());
        let (p, _) = tile(0);
        assert!(crf_refine_batch(&[p], &[], &CrfParams::default(), 1).is_err());
    }
}
