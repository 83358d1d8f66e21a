//! Training-time augmentation: random D4 geometry, smooth elastic warps and
//! (for the student) additive pixel noise. One sampled [`Augmentation`] is
//! applied consistently to an image, its mask, its validity plane and any
//! teacher probability map.

use alloc::vec;
use alloc::vec::Vec;

use crate::d4::D4Element;
use crate::data::{CompositeImage, GroundTruthMask};
use crate::ensemble::ProbabilityMap;
use crate::error::{bail, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Probability of a random non-trivial quarter turn.
    pub rotate_prob: f64,
    pub elastic_prob: f64,
    /// Largest displacement of the elastic warp, in pixels.
    pub elastic_alpha: f64,
    /// Gaussian smoothing of the displacement noise, in pixels.
    pub elastic_sigma: f64,
    /// Std of additive noise on the composite image; 0 disables it.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, rotate_prob: 0.5, elastic_prob: 0.3, elastic_alpha: 2.0, elastic_sigma: 8.0, noise_std: 0.0 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { flip_prob: 0.0, rotate_prob: 0.0, elastic_prob: 0.0, noise_std: 0.0, ..Self::default() }
    }

    /// The default geometry plus input noise, used for student training.
    pub fn strong() -> Self {
        Self { elastic_prob: 0.5, noise_std: 0.05, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("rotate_prob", self.rotate_prob), ("elastic_prob", self.elastic_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{} must lie in [0, 1], got {}", name, p);
            }
        }
        if !(self.elastic_alpha >= 0.0 && self.elastic_alpha.is_finite()) {
            bail!(Config, "elastic_alpha must be finite and non-negative, got {}", self.elastic_alpha);
        }
        if !(self.elastic_sigma > 0.0 && self.elastic_sigma.is_finite()) {
            bail!(Config, "elastic_sigma must be positive, got {}", self.elastic_sigma);
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bail!(Config, "noise_std must be finite and non-negative, got {}", self.noise_std);
        }
        Ok(())
    }
}

/// One sampled set of augmentation parameters for a `height × width` tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    height: usize,
    width: usize,
    geometry: D4Element,
    /// Per output pixel `(dy, dx)` source offsets.
    displacement: Option<(Vec<f32>, Vec<f32>)>,
    noise: Option<(u64, f64)>,
}

impl Augmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        Self { height, width, geometry: D4Element::Identity, displacement: None, noise: None }
    }

    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[0xA06]);
        let flip = rng::uniform(&mut r) < cfg.flip_prob;
        let rotate = rng::uniform(&mut r) < cfg.rotate_prob;
        let turn = if height == width {
            [D4Element::Rot90, D4Element::Rot180, D4Element::Rot270][rng::below(&mut r, 3)]
        } else {
            D4Element::Rot180
        };
        let mut geometry = if flip { D4Element::FlipHorizontal } else { D4Element::Identity };
        if rotate {
            geometry = geometry.then(turn);
        }
        let elastic = rng::uniform(&mut r) < cfg.elastic_prob && cfg.elastic_alpha > 0.0;
        let displacement = if elastic {
            let dy = smooth_noise(&mut r, height, width, cfg.elastic_sigma, cfg.elastic_alpha);
            let dx = smooth_noise(&mut r, height, width, cfg.elastic_sigma, cfg.elastic_alpha);
            Some((dy, dx))
        } else {
            None
        };
        let noise_seed = rng::derive(seed, &[0x4015E]);
        let noise = (cfg.noise_std > 0.0).then_some((noise_seed, cfg.noise_std));
        Ok(Self { height, width, geometry, displacement, noise })
    }

    pub fn geometry(&self) -> D4Element {
        self.geometry
    }

    pub fn is_elastic(&self) -> bool {
        self.displacement.is_some()
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if (height, width) != (self.height, self.width) {
            bail!(Shape, "augmentation sampled for {}x{}, applied to {}x{}", self.height, self.width, height, width);
        }
        Ok(())
    }

    fn out_dims(&self) -> (usize, usize) {
        if self.geometry.swaps_axes() {
            (self.width, self.height)
        } else {
            (self.height, self.width)
        }
    }

    fn warp_linear(&self, plane: Vec<f32>) -> Vec<f32> {
        let Some((dy, dx)) = &self.displacement else { return plane };
        let (h, w) = self.out_dims();
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sy = (y as f32 + dy[i]).clamp(0.0, (h - 1) as f32);
                let sx = (x as f32 + dx[i]).clamp(0.0, (w - 1) as f32);
                let (y0, x0) = (sy as usize, sx as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (sy - y0 as f32, sx - x0 as f32);
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out[i] = top * (1.0 - ty) + bottom * ty;
            }
        }
        out
    }

    fn warp_nearest<T: Copy>(&self, plane: Vec<T>) -> Vec<T> {
        let Some((dy, dx)) = &self.displacement else { return plane };
        let (h, w) = self.out_dims();
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let sy = libm::roundf(y as f32 + dy[i]).clamp(0.0, (h - 1) as f32) as usize;
                let sx = libm::roundf(x as f32 + dx[i]).clamp(0.0, (w - 1) as f32) as usize;
                plane[sy * w + sx]
            })
            .collect()
    }

    pub fn apply_image(&self, image: &CompositeImage) -> Result<CompositeImage> {
        self.check(image.height(), image.width())?;
        let (h, w) = self.out_dims();
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let plane = self.geometry.apply_plane(image.channel(c), self.height, self.width)?;
            data.extend(self.warp_linear(plane));
        }
        if let Some((seed, std)) = self.noise {
            let mut r = rng::stream(seed, &[]);
            for v in &mut data {
                *v = (*v + (std * rng::normal(&mut r)) as f32).clamp(0.0, 1.0);
            }
        }
        CompositeImage::from_planar(h, w, data)
    }

    pub fn apply_mask(&self, mask: &GroundTruthMask) -> Result<GroundTruthMask> {
        self.check(mask.height(), mask.width())?;
        let (h, w) = self.out_dims();
        let plane = self.geometry.apply_plane(mask.labels(), self.height, self.width)?;
        GroundTruthMask::new(h, w, self.warp_nearest(plane))
    }

    pub fn apply_valid(&self, valid: &[bool]) -> Result<Vec<bool>> {
        if valid.len() != self.height * self.width {
            bail!(Shape, "validity plane has {} pixels, expected {}", valid.len(), self.height * self.width);
        }
        Ok(self.warp_nearest(self.geometry.apply_plane(valid, self.height, self.width)?))
    }

    /// Geometry and warp only; bilinear weights keep each pixel on the simplex.
    pub fn apply_probs(&self, probs: &ProbabilityMap) -> Result<ProbabilityMap> {
        self.check(probs.height(), probs.width())?;
        let (h, w) = self.out_dims();
        let mut data = Vec::with_capacity(2 * h * w);
        for c in 0..2 {
            let plane: Vec<f32> = probs.class(c).iter().map(|v| *v as f32).collect();
            let moved = self.warp_linear(self.geometry.apply_plane(&plane, self.height, self.width)?);
            data.extend(moved.into_iter().map(f64::from));
        }
        for i in 0..h * w {
            let s = data[i] + data[h * w + i];
            data[i] /= s;
            data[h * w + i] /= s;
        }
        ProbabilityMap::new(h, w, data)
    }
}

/// Uniform noise smoothed by a separable Gaussian and scaled so its largest
/// magnitude is `alpha`.
fn smooth_noise(r: &mut rng::SeededRng, h: usize, w: usize, sigma: f64, alpha: f64) -> Vec<f32> {
    let raw: Vec<f64> = (0..h * w).map(|_| 2.0 * rng::uniform(r) - 1.0).collect();
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma))).collect();
    let reflect = |i: isize, n: usize| {
        let period = (2 * n.saturating_sub(1)).max(1) as isize;
        crate::tensor::reflect_index(i.rem_euclid(period) as usize, n)
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * raw[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { alpha / peak } else { 0.0 };
    out.into_iter().map(|v| (v * scale) as f32).collect()
}

/// Samples one augmentation and applies it to an image and its mask.
pub fn train_augment(
    image: &CompositeImage,
    mask: &GroundTruthMask,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(CompositeImage, GroundTruthMask)> {
    let aug = Augmentation::sample(cfg, image.height(), image.width(), seed)?;
    Ok((aug.apply_image(image)?, aug.apply_mask(mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(n: usize) -> (CompositeImage, GroundTruthMask) {
        let mut data = vec![0.0f32; 3 * n * n];
        let mut labels = vec![0u8; n * n];
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                data[i] = ((x / 2 + y / 2) % 2) as f32;
                data[n * n + i] = x as f32 / n as f32;
                data[2 * n * n + i] = y as f32 / n as f32;
                labels[i] = u8::from(x < n / 4);
            }
        }
        (CompositeImage::from_planar(n, n, data).unwrap(), GroundTruthMask::new(n, n, labels).unwrap())
    }

    #[test]
    fn probability_zero_is_identity() {
        let (img, mask) = checker(8);
        for seed in 0..10 {
            let (i2, m2) = train_augment(&img, &mask, &AugmentConfig::none(), seed).unwrap();
            assert_eq!(i2, img);
            assert_eq!(m2, mask);
        }
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let (img, mask) = checker(8);
        let cfg = AugmentConfig { flip_prob: 1.0, ..AugmentConfig::none() };
        let (i2, m2) = train_augment(&img, &mask, &cfg, 4).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(i2.channel(c)[y * 8 + x], img.channel(c)[y * 8 + 7 - x]);
                }
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m2.labels()[y * 8 + x], mask.labels()[y * 8 + 7 - x]);
            }
        }
    }

    #[test]
    fn forced_rotation_matches_hand_rotation() {
        let (img, mask) = checker(8);
        let cfg = AugmentConfig { rotate_prob: 1.0, ..AugmentConfig::none() };
        for seed in 0..12 {
            let aug = Augmentation::sample(&cfg, 8, 8, seed).unwrap();
            let g = aug.geometry();
            assert!(matches!(g, D4Element::Rot90 | D4Element::Rot180 | D4Element::Rot270));
            let out = aug.apply_mask(&mask).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    // source pixel under each counter-clockwise turn
                    let (sy, sx) = match g {
                        D4Element::Rot90 => (x, 7 - y),
                        D4Element::Rot180 => (7 - y, 7 - x),
                        _ => (7 - x, y),
                    };
                    assert_eq!(out.labels()[y * 8 + x], mask.labels()[sy * 8 + sx]);
                }
            }
            let i2 = aug.apply_image(&img).unwrap();
            assert_eq!(i2.channel(0), &g.apply_plane(img.channel(0), 8, 8).unwrap()[..]);
        }
    }

    #[test]
    fn elastic_keeps_masks_binary_and_probs_on_simplex() {
        let (img, mask) = checker(32);
        let cfg = AugmentConfig { elastic_prob: 1.0, elastic_alpha: 3.0, ..AugmentConfig::none() };
        let aug = Augmentation::sample(&cfg, 32, 32, 7).unwrap();
        assert!(aug.is_elastic());
        let m = aug.apply_mask(&mask).unwrap();
        assert!(m.labels().iter().all(|v| *v <= 1));
        let i2 = aug.apply_image(&img).unwrap();
        assert_ne!(i2, img);
        let flooded: Vec<f64> = (0..32 * 32).map(|i| (i % 32) as f64 / 31.0).collect();
        let mut data: Vec<f64> = flooded.iter().map(|p| 1.0 - p).collect();
        data.extend(&flooded);
        let probs = ProbabilityMap::new(32, 32, data).unwrap();
        aug.apply_probs(&probs).unwrap().validate_simplex(1e-9).unwrap();
    }

    fn components(m: &GroundTruthMask) -> usize {
        let (h, w) = (m.height(), m.width());
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for s in 0..h * w {
            if m.labels()[s] == 0 || seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let n = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in n {
                    if ny < h && nx < w && m.labels()[ny * w + nx] == 1 && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        stack.push(ny * w + nx);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn default_elastic_preserves_components_at_64() {
        let mut labels = vec![0u8; 64 * 64];
        for y in 0..64 {
            for x in 0..64 {
                let d1 = (y as i32 - 16).pow(2) + (x as i32 - 16).pow(2);
                let d2 = (y as i32 - 44).pow(2) + (x as i32 - 40).pow(2);
                labels[y * 64 + x] = u8::from(d1 < 64 || d2 < 100);
            }
        }
        let mask = GroundTruthMask::new(64, 64, labels).unwrap();
        assert_eq!(components(&mask), 2);
        let cfg = AugmentConfig { elastic_prob: 1.0, ..AugmentConfig::default() };
        for seed in 0..50 {
            let aug = Augmentation::sample(&cfg, 64, 64, seed).unwrap();
            assert_eq!(components(&aug.apply_mask(&mask).unwrap()), 2);
        }
    }

    #[test]
    fn noise_stays_in_unit_range_and_is_seeded() {
        let (img, mask) = checker(8);
        let cfg = AugmentConfig { noise_std: 0.3, ..AugmentConfig::none() };
        let (a, ma) = train_augment(&img, &mask, &cfg, 1).unwrap();
        let (b, _) = train_augment(&img, &mask, &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mask);
        assert!(a.planar().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, img);
    }

    #[test]
    fn rectangles_only_get_half_turns() {
        let img = CompositeImage::from_planar(4, 6, vec![0.5; 72]).unwrap();
        let cfg = AugmentConfig { rotate_prob: 1.0, flip_prob: 1.0, ..AugmentConfig::none() };
        for seed in 0..8 {
            let aug = Augmentation::sample(&cfg, 4, 6, seed).unwrap();
            assert!(!aug.geometry().swaps_axes());
            assert_eq!(aug.apply_image(&img).unwrap().height(), 4);
        }
    }

    #[test]
    fn invalid_config() {
        let cfg = AugmentConfig { flip_prob: 1.5, ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig { elastic_sigma: 0.0, ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
