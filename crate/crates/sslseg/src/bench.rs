//! Per-tile inference latency: plain forward, D4 test-time augmentation and
//! CRF refinement.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sslseg_core::crf::{crf_refine, CrfParams};
use sslseg_core::data::CompositeImage;
use sslseg_core::ensemble::{ensemble_predict, EnsembleModel};
use sslseg_core::model::SegmentationModel;

use crate::error::{Error, Result};

pub const MIN_REPETITIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub stage: String,
    pub samples: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub tiles: usize,
    pub repetitions: usize,
    pub members: usize,
    pub stages: Vec<StageLatency>,
}

impl LatencyReport {
    pub fn stage(&self, name: &str) -> Option<&StageLatency> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Nearest-rank quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn summarize(stage: &str, mut samples: Vec<f64>) -> StageLatency {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 { samples[n / 2] } else { 0.5 * (samples[n / 2 - 1] + samples[n / 2]) };
    StageLatency { stage: stage.into(), samples: n, median_ms: median, p95_ms: quantile(&samples, 0.95) }
}

fn time_ms<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64() * 1e3))
}

/// Times each stage once per tile per repetition. `crf` times the
/// refinement alone, on the plain forward output.
pub fn benchmark_inference<M: SegmentationModel>(
    ensemble: &EnsembleModel<M>,
    tiles: &[&CompositeImage],
    use_tta: bool,
    crf: Option<&CrfParams>,
    repetitions: usize,
) -> Result<LatencyReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::Config(format!("benchmark repetitions must be at least {MIN_REPETITIONS}, got {repetitions}")));
    }
    if tiles.is_empty() {
        return Err(Error::Config("benchmark needs at least one tile".into()));
    }
    let (mut fwd, mut tta, mut refine) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repetitions {
        for img in tiles {
            let (probs, ms) = time_ms(|| Ok(ensemble_predict(ensemble, img, false)?))?;
            fwd.push(ms);
            if use_tta {
                tta.push(time_ms(|| Ok(ensemble_predict(ensemble, img, true)?))?.1);
            }
            if let Some(params) = crf {
                refine.push(time_ms(|| Ok(crf_refine(&probs, img, params)?))?.1);
            }
        }
    }
    let mut stages = vec![summarize("forward", fwd)];
    if use_tta {
        stages.push(summarize("tta", tta));
    }
    if crf.is_some() {
        stages.push(summarize("crf", refine));
    }
    Ok(LatencyReport { tiles: tiles.len(), repetitions, members: ensemble.len(), stages })
}
