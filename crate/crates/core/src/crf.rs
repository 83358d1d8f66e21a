//! Fully connected CRF with Gaussian pairwise kernels and Potts
//! compatibility, solved by exact mean-field iterations over all pixel pairs.
//!
//! `k(i,j) = w1·exp(−|s_i−s_j|²/2θγ²) + w2·exp(−|s_i−s_j|²/2θα² − |I_i−I_j|²/2θβ²)`

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{CompositeImage, GroundTruthMask};
use crate::ensemble::{softmax2, ProbabilityMap};
use crate::error::{bail, Result};

/// Floor applied to probabilities before taking the unary `−log`.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    pub iterations: usize,
    pub smoothness_weight: f64,
    pub smoothness_sigma: f64,
    pub appearance_weight: f64,
    /// Spatial range of the appearance kernel; `None` scales with the tile
    /// as `80 · h / 256`.
    pub appearance_sigma_xy: Option<f64>,
    pub appearance_sigma_rgb: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            smoothness_weight: 3.0,
            smoothness_sigma: 3.0,
            appearance_weight: 10.0,
            appearance_sigma_xy: None,
            appearance_sigma_rgb: 0.1,
        }
    }
}

impl CrfParams {
    pub fn appearance_sigma_xy_for(&self, height: usize) -> f64 {
        self.appearance_sigma_xy.unwrap_or(80.0 * height as f64 / 256.0)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [("smoothness_weight", self.smoothness_weight), ("appearance_weight", self.appearance_weight)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "{} must be finite and >= 0, got {}", name, v);
            }
        }
        let pos = [
            ("smoothness_sigma", self.smoothness_sigma),
            ("appearance_sigma_xy", self.appearance_sigma_xy.unwrap_or(1.0)),
            ("appearance_sigma_rgb", self.appearance_sigma_rgb),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                bail!(Config, "{} must be finite and > 0, got {}", name, v);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPrediction {
    pub tile_id: String,
    pub q: ProbabilityMap,
    pub labels: GroundTruthMask,
}

impl RefinedPrediction {
    pub fn with_tile_id(mut self, id: impl Into<String>) -> Self {
        self.tile_id = id.into();
        self
    }
}

fn gaussian_table(n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma))).collect()
}

fn labels_of(q: &ProbabilityMap) -> GroundTruthMask {
    let labels = q.class(0).iter().zip(q.class(1)).map(|(a, b)| u8::from(b > a)).collect();
    GroundTruthMask::new(q.height(), q.width(), labels).expect("sizes come from the map")
}

/// Largest number of unordered pixel pairs whose kernel values are cached.
const MAX_CACHED_PAIRS: usize = 1 << 24;

/// Pairwise kernel over all unordered pixel pairs `i < j`, cached row by row
/// when small enough and recomputed on every pass otherwise.
struct Kernel {
    w: usize,
    params: CrfParams,
    smooth_y: Vec<f64>,
    smooth_x: Vec<f64>,
    app_y: Vec<f64>,
    app_x: Vec<f64>,
    colour: Vec<[f64; 3]>,
    cache: Option<Vec<f64>>,
}

impl Kernel {
    fn new(rgb: &CompositeImage, params: &CrfParams) -> Self {
        let (h, w) = (rgb.height(), rgb.width());
        let n = h * w;
        let dim = h.max(w);
        let theta_a = params.appearance_sigma_xy_for(h);
        let mut k = Kernel {
            w,
            params: *params,
            smooth_y: gaussian_table(dim, params.smoothness_sigma),
            smooth_x: gaussian_table(dim, params.smoothness_sigma),
            app_y: gaussian_table(dim, theta_a),
            app_x: gaussian_table(dim, theta_a),
            colour: (0..n).map(|i| rgb.pixel(i).map(f64::from)).collect(),
            cache: None,
        };
        let pairs = n * n.saturating_sub(1) / 2;
        if pairs <= MAX_CACHED_PAIRS {
            let mut cache = Vec::with_capacity(pairs);
            for i in 0..n {
                cache.extend((i + 1..n).map(|j| k.pair(i, j)));
            }
            k.cache = Some(cache);
        }
        k
    }

    fn pair(&self, i: usize, j: usize) -> f64 {
        let w = self.w;
        let dy = (j / w).abs_diff(i / w);
        let dx = (j % w).abs_diff(i % w);
        let mut k = self.params.smoothness_weight * self.smooth_y[dy] * self.smooth_x[dx];
        if self.params.appearance_weight != 0.0 {
            let (ci, cj) = (self.colour[i], self.colour[j]);
            let d2 = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
            let inv = 1.0 / (2.0 * self.params.appearance_sigma_rgb * self.params.appearance_sigma_rgb);
            k += self.params.appearance_weight * self.app_y[dy] * self.app_x[dx] * libm::exp(-d2 * inv);
        }
        k
    }

    /// `out_i = Σ_{j≠i} k(i,j) · input_j`, summed in a fixed order.
    fn filter(&self, input: &[f64]) -> Vec<f64> {
        let n = input.len();
        let mut out = vec![0.0; n];
        let mut offset = 0;
        for i in 0..n {
            let mut acc = 0.0;
            let row = n - i - 1;
            match &self.cache {
                Some(cache) => {
                    let ks = &cache[offset..offset + row];
                    for (t, k) in ks.iter().enumerate() {
                        let j = i + 1 + t;
                        acc += k * input[j];
                        out[j] += k * input[i];
                    }
                }
                None => {
                    for j in i + 1..n {
                        let k = self.pair(i, j);
                        acc += k * input[j];
                        out[j] += k * input[i];
                    }
                }
            }
            offset += row;
            out[i] += acc;
        }
        out
    }
}

/// Mean-field refinement of a two-class probability map.
pub fn crf_refine(probs: &ProbabilityMap, rgb: &CompositeImage, params: &CrfParams) -> Result<RefinedPrediction> {
    params.validate()?;
    if let Err(e) = probs.validate_simplex(1e-6) {
        bail!(Validation, "CRF input is not a per-pixel distribution: {}", e);
    }
    let (h, w) = (probs.height(), probs.width());
    if (rgb.height(), rgb.width()) != (h, w) {
        bail!(Shape, "probabilities {}x{} vs image {}x{}", h, w, rgb.height(), rgb.width());
    }
    if params.iterations == 0 {
        let q = probs.clone();
        return Ok(RefinedPrediction { tile_id: String::new(), labels: labels_of(&q), q });
    }
    let n = h * w;
    let unary0: Vec<f64> = probs.class(0).iter().map(|p| -libm::log(p.clamp(PROB_FLOOR, 1.0))).collect();
    let unary1: Vec<f64> = probs.class(1).iter().map(|p| -libm::log(p.clamp(PROB_FLOOR, 1.0))).collect();
    let kernel = Kernel::new(rgb, params);
    let mut q1: Vec<f64> = (0..n).map(|i| softmax2(-unary0[i], -unary1[i]).1).collect();
    let totals = kernel.filter(&vec![1.0; n]);
    for _ in 0..params.iterations {
        let m1 = kernel.filter(&q1);
        for i in 0..n {
            // Potts: label 0 pays for neighbours in 1 and vice versa
            let e0 = unary0[i] + m1[i];
            let e1 = unary1[i] + (totals[i] - m1[i]);
            q1[i] = softmax2(-e0, -e1).1;
        }
    }
    let mut data: Vec<f64> = q1.iter().map(|p| 1.0 - p).collect();
    data.extend(&q1);
    let q = ProbabilityMap::new(h, w, data)?;
    Ok(RefinedPrediction { tile_id: String::new(), labels: labels_of(&q), q })
}
