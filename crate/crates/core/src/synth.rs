//! Synthetic SAR-like tiles.
//!
//! Flood regions are thresholded low-frequency noise imprinted as
//! low-backscatter areas in both polarizations. Land carries a smooth texture
//! field, optional dark look-alike patches (freshly harvested fields), and
//! multiplicative gamma speckle. Swath gaps blank a band or nearly the whole
//! tile.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{
    compose_rgb, CompositeScaling, ConfidenceTier, DatasetIndex, GroundTruthMask, LabeledExample, Split, TilePair,
};
use crate::error::{bail, Result};
use crate::rng::{self, SeededRng};

/// Mean backscatter levels and scene statistics for one geographic "region".
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProfile {
    pub name: String,
    pub land_vv: f32,
    pub land_vh: f32,
    pub water_vv: f32,
    pub water_vh: f32,
    /// Std-dev of the log-texture field on land.
    pub texture: f32,
    /// Probability that a tile contains a dark look-alike patch.
    pub dark_field_rate: f64,
    pub dark_field_vv: f32,
    pub dark_field_vh: f32,
    /// Coarse noise grid cells per tile side; larger means smaller blobs.
    pub blob_cells: usize,
}

impl RegionProfile {
    /// Looks up a built-in profile by name (`region-a`, `region-b`, `region-c`).
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "region-a" => Some(Self::region_a()),
            "region-b" => Some(Self::region_b()),
            "region-c" => Some(Self::region_c()),
            _ => None,
        }
    }

    pub fn region_a() -> Self {
        Self {
            name: "region-a".into(),
            land_vv: 0.25,
            land_vh: 0.06,
            water_vv: 0.02,
            water_vh: 0.005,
            texture: 0.3,
            dark_field_rate: 0.2,
            dark_field_vv: 0.05,
            dark_field_vh: 0.03,
            blob_cells: 3,
        }
    }

    pub fn region_b() -> Self {
        Self {
            name: "region-b".into(),
            land_vv: 0.17,
            land_vh: 0.045,
            water_vv: 0.03,
            water_vh: 0.008,
            texture: 0.4,
            dark_field_rate: 0.5,
            dark_field_vv: 0.045,
            dark_field_vh: 0.02,
            blob_cells: 4,
        }
    }

    pub fn region_c() -> Self {
        Self {
            name: "region-c".into(),
            land_vv: 0.16,
            land_vh: 0.04,
            water_vv: 0.028,
            water_vh: 0.007,
            texture: 0.45,
            dark_field_rate: 0.45,
            dark_field_vv: 0.05,
            dark_field_vh: 0.022,
            blob_cells: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub tile_size: usize,
    pub tile_count: usize,
    /// Exact share of tiles with at least one flooded pixel (rounded to a count).
    pub flood_proportion: f64,
    /// Number of looks of the gamma speckle; lower is noisier.
    pub speckle_looks: u32,
    pub swath_gap_rate: f64,
    pub region: RegionProfile,
    pub split: Split,
    pub id_prefix: String,
    pub scaling: CompositeScaling,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            tile_size: 64,
            tile_count: 32,
            flood_proportion: 0.5,
            speckle_looks: 4,
            swath_gap_rate: 0.05,
            region: RegionProfile::region_a(),
            split: Split::Train,
            id_prefix: "tile".into(),
            scaling: default_scaling(),
        }
    }
}

/// Scaling matched to the built-in region profiles.
pub fn default_scaling() -> CompositeScaling {
    CompositeScaling { vv: (0.0, 0.6), vh: (0.0, 0.15), ratio: (0.0, 12.0) }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 4 {
            bail!(Config, "tile_size must be at least 4, got {}", self.tile_size);
        }
        if self.tile_count == 0 {
            bail!(Config, "tile_count must be positive");
        }
        if self.speckle_looks == 0 {
            bail!(Config, "speckle_looks must be positive");
        }
        if !(0.0..=1.0).contains(&self.flood_proportion) {
            bail!(Config, "flood_proportion must lie in [0, 1], got {}", self.flood_proportion);
        }
        if !(0.0..=1.0).contains(&self.swath_gap_rate) {
            bail!(Config, "swath_gap_rate must lie in [0, 1], got {}", self.swath_gap_rate);
        }
        if !(0.0..=1.0).contains(&self.region.dark_field_rate) {
            bail!(Config, "dark_field_rate must lie in [0, 1]");
        }
        if self.region.blob_cells == 0 {
            bail!(Config, "blob_cells must be positive");
        }
        self.scaling.validate()
    }

    pub fn flood_tile_count(&self) -> usize {
        libm::round(self.flood_proportion * self.tile_count as f64) as usize
    }
}

/// One generated tile before compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTile {
    pub id: String,
    pub tile: TilePair,
    pub mask: GroundTruthMask,
}

pub fn generate_tiles(spec: &GeneratorSpec, seed: u64) -> Result<Vec<SyntheticTile>> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..spec.tile_count).collect();
    rng::shuffle(&mut rng::stream(seed, &[0xF100D]), &mut order);
    let mut flooded = vec![false; spec.tile_count];
    for &i in order.iter().take(spec.flood_tile_count()) {
        flooded[i] = true;
    }
    (0..spec.tile_count)
        .map(|i| {
            let mut rng = rng::stream(seed, &[0x711E, i as u64]);
            let id = format!("{}{:04}", spec.id_prefix, i);
            let (tile, mask) = generate_one(spec, flooded[i], &mut rng)?;
            Ok(SyntheticTile { id, tile, mask })
        })
        .collect()
}

pub fn generate_synthetic_dataset(spec: &GeneratorSpec, seed: u64) -> Result<DatasetIndex> {
    let tiles = generate_tiles(spec, seed)?;
    let examples = tiles
        .into_iter()
        .map(|t| {
            let image = compose_rgb(&t.tile, &spec.scaling)?;
            let valid = t.tile.valid().to_vec();
            LabeledExample::new(t.id, image, t.mask, valid, ConfidenceTier::High, spec.region.name.clone()).map(Arc::new)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetIndex::new(spec.split, examples)
}

/// Smooth noise in roughly `[-1, 1]`: random lattice values with smoothstep
/// interpolation.
fn smooth_field(rng: &mut SeededRng, size: usize, cells: usize) -> Vec<f32> {
    let g = cells + 1;
    let lattice: Vec<f32> = (0..g * g).map(|_| (2.0 * rng::uniform(rng) - 1.0) as f32).collect();
    let mut out = vec![0.0f32; size * size];
    let scale = cells as f32 / size as f32;
    for y in 0..size {
        let fy = (y as f32 + 0.5) * scale;
        let y0 = (fy as usize).min(cells - 1);
        let ty = smoothstep(fy - y0 as f32);
        for x in 0..size {
            let fx = (x as f32 + 0.5) * scale;
            let x0 = (fx as usize).min(cells - 1);
            let tx = smoothstep(fx - x0 as f32);
            let a = lattice[y0 * g + x0];
            let b = lattice[y0 * g + x0 + 1];
            let c = lattice[(y0 + 1) * g + x0];
            let d = lattice[(y0 + 1) * g + x0 + 1];
            let top = a + (b - a) * tx;
            let bottom = c + (d - c) * tx;
            out[y * size + x] = top + (bottom - top) * ty;
        }
    }
    out
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Marks the top `fraction` of `field` (at least one pixel).
fn threshold_top(field: &[f32], fraction: f64) -> Vec<bool> {
    let mut sorted = field.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * field.len() as f64) as usize).clamp(1, field.len());
    let cut = sorted[k - 1];
    field.iter().map(|v| *v >= cut).collect()
}

fn speckle(rng: &mut SeededRng, looks: u32) -> f32 {
    // Gamma(L, 1/L) as the mean of L unit exponentials
    let mut acc = 0.0;
    for _ in 0..looks {
        acc += -libm::log(1.0 - rng::uniform(rng));
    }
    (acc / looks as f64) as f32
}

fn generate_one(spec: &GeneratorSpec, flood: bool, rng: &mut SeededRng) -> Result<(TilePair, GroundTruthMask)> {
    let n = spec.tile_size;
    let region = &spec.region;
    let texture = smooth_field(rng, n, region.blob_cells + 2);

    let water = if flood {
        let field = smooth_field(rng, n, region.blob_cells);
        let fraction = 0.08 + 0.27 * rng::uniform(rng);
        threshold_top(&field, fraction)
    } else {
        vec![false; n * n]
    };
    let dark = if rng::uniform(rng) < region.dark_field_rate {
        let field = smooth_field(rng, n, region.blob_cells + 1);
        let fraction = 0.05 + 0.15 * rng::uniform(rng);
        threshold_top(&field, fraction)
    } else {
        vec![false; n * n]
    };

    let mut vv = vec![0.0f32; n * n];
    let mut vh = vec![0.0f32; n * n];
    for i in 0..n * n {
        let (mv, mh, tex) = if water[i] {
            (region.water_vv, region.water_vh, 1.0)
        } else if dark[i] {
            (region.dark_field_vv, region.dark_field_vh, 1.0)
        } else {
            (region.land_vv, region.land_vh, libm::expf(region.texture * texture[i]))
        };
        vv[i] = mv * tex * speckle(rng, spec.speckle_looks);
        vh[i] = mh * tex * speckle(rng, spec.speckle_looks);
    }

    let mut valid = vec![true; n * n];
    if rng::uniform(rng) < spec.swath_gap_rate {
        let near_empty = !flood && rng::uniform(rng) < 0.5;
        if near_empty {
            // below the 0.5 % screening threshold
            let keep = ((0.002 * (n * n) as f64) as usize).min(n);
            for (i, v) in valid.iter_mut().enumerate() {
                *v = i < keep;
            }
        } else {
            let cut = ((0.2 + 0.4 * rng::uniform(rng)) * n as f64) as usize;
            let from_left = rng::uniform(rng) < 0.5;
            let mut banded = valid.clone();
            for y in 0..n {
                for x in 0..n {
                    let gap = if from_left { x < cut } else { x >= n - cut };
                    if gap {
                        banded[y * n + x] = false;
                    }
                }
            }
            // a flood tile must keep some observed flood
            if !flood || (0..n * n).any(|i| banded[i] && water[i]) {
                valid = banded;
            }
        }
    }

    let labels: Vec<u8> = (0..n * n).map(|i| u8::from(water[i] && valid[i])).collect();
    let tile = TilePair::new(n, n, vv, vh, valid)?;
    let mask = GroundTruthMask::new(n, n, labels)?;
    Ok((tile, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, proportion: f64) -> GeneratorSpec {
        GeneratorSpec { tile_size: 16, tile_count: count, flood_proportion: proportion, ..Default::default() }
    }

    #[test]
    fn full_flood_proportion() {
        let idx = generate_synthetic_dataset(&small(12, 1.0), 4).unwrap();
        assert!(idx.examples().iter().all(|e| e.flood_present()));
    }

    #[test]
    fn identical_seeds_identical_data() {
        let spec = GeneratorSpec { swath_gap_rate: 0.5, ..small(8, 0.5) };
        assert_eq!(generate_tiles(&spec, 9).unwrap(), generate_tiles(&spec, 9).unwrap());
        assert_ne!(generate_tiles(&spec, 9).unwrap(), generate_tiles(&spec, 10).unwrap());
    }

    #[test]
    fn exact_flood_count() {
        let idx = generate_synthetic_dataset(&small(100, 0.3), 1).unwrap();
        let count = idx.examples().iter().filter(|e| e.mask().any_flooded()).count();
        assert_eq!(count, 30);
        assert_eq!(idx.flood_present_count(), 30);
    }

    #[test]
    fn swath_gaps_are_injected() {
        let spec = GeneratorSpec { swath_gap_rate: 1.0, ..small(40, 0.5) };
        let idx = generate_synthetic_dataset(&spec, 2).unwrap();
        assert!(idx.examples().iter().all(|e| e.valid_fraction() < 1.0));
        assert!(idx.examples().iter().any(|e| e.valid_fraction() < 0.005));
        assert_eq!(idx.flood_present_count(), 20);
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate_tiles(&small(0, 0.5), 0).is_err());
        assert!(generate_tiles(&GeneratorSpec { tile_size: 0, ..small(4, 0.5) }, 0).is_err());
        assert!(generate_tiles(&small(4, 1.5), 0).is_err());
    }

    #[test]
    fn water_is_darker_than_land() {
        let tiles = generate_tiles(&GeneratorSpec { swath_gap_rate: 0.0, ..small(10, 1.0) }, 3).unwrap();
        let (mut w, mut nw, mut l, mut nl) = (0.0f64, 0usize, 0.0f64, 0usize);
        for t in &tiles {
            for (i, &m) in t.mask.labels().iter().enumerate() {
                if m == 1 {
                    w += t.tile.vv()[i] as f64;
                    nw += 1;
                } else {
                    l += t.tile.vv()[i] as f64;
                    nl += 1;
                }
            }
        }
        assert!(w / (nw as f64) < 0.5 * l / (nl as f64));
    }
}
