//! Dataset directories and raster files.
//!
//! A dataset root holds `manifest.json` plus, per tile, `vv_<id>.bin`,
//! `vh_<id>.bin` (little-endian f32), `mask_<id>.bin` and `valid_<id>.bin`
//! (u8). Pseudo-labelled copies of pool tiles live in the train split under
//! the same id, with their labels in `pseudo_<id>.bin`. Every raster starts with a 16-byte header: the magic `SSLT`, then
//! height, width and channel count as little-endian u32.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sslseg_core::data::{
    compose_rgb, filter_swath_gaps, CompositeScaling, ConfidenceTier, DatasetIndex, GroundTruthMask, LabeledExample,
    Split, TilePair,
};
use sslseg_core::ensemble::ProbabilityMap;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"SSLT";
pub const HEADER_LEN: usize = 16;
pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// One tile as stored on disk: raw backscatter plus its label plane.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTile {
    pub id: String,
    pub split: Split,
    pub region: String,
    pub tier: ConfidenceTier,
    pub tile: TilePair,
    pub mask: GroundTruthMask,
}

impl StoredTile {
    pub fn example(&self, scaling: &CompositeScaling) -> Result<LabeledExample> {
        let image = compose_rgb(&self.tile, scaling)?;
        Ok(LabeledExample::new(
            self.id.clone(),
            image,
            self.mask.clone(),
            self.tile.valid().to_vec(),
            self.tier,
            self.region.clone(),
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingRecord {
    pub vv: [f32; 2],
    pub vh: [f32; 2],
    pub ratio: [f32; 2],
}

impl From<CompositeScaling> for ScalingRecord {
    fn from(s: CompositeScaling) -> Self {
        Self { vv: [s.vv.0, s.vv.1], vh: [s.vh.0, s.vh.1], ratio: [s.ratio.0, s.ratio.1] }
    }
}

impl From<ScalingRecord> for CompositeScaling {
    fn from(s: ScalingRecord) -> Self {
        Self { vv: (s.vv[0], s.vv[1]), vh: (s.vh[0], s.vh[1]), ratio: (s.ratio[0], s.ratio[1]) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub region: String,
    pub tier: String,
    pub flood_present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub scaling: ScalingRecord,
    pub tiles: Vec<ManifestEntry>,
}

fn tier_str(t: ConfidenceTier) -> &'static str {
    match t {
        ConfidenceTier::High => "high",
        ConfidenceTier::Low => "low",
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn label_kind(tier: ConfidenceTier) -> &'static str {
    match tier {
        ConfidenceTier::High => "mask",
        ConfidenceTier::Low => "pseudo",
    }
}

pub fn raster_path(root: &Path, kind: &str, id: &str) -> PathBuf {
    root.join(format!("{kind}_{id}.bin"))
}

/// Writes one raster with its header.
pub fn write_raster(path: &Path, height: usize, width: usize, channels: usize, payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len());
    bytes.extend_from_slice(&MAGIC);
    for v in [height, width, channels] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(payload);
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&bytes).at(path)
}

/// Reads a raster, checking the header and that the payload holds
/// `elem_size` bytes per value.
pub fn read_raster(path: &Path, elem_size: usize) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).at(path)?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), section: "raster header", reason };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (field(0), field(1), field(2));
    let want = h * w * c * elem_size;
    if bytes.len() - HEADER_LEN != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            section: "raster payload",
            reason: format!("{h}x{w}x{c} needs {want} bytes, found {}", bytes.len() - HEADER_LEN),
        });
    }
    Ok((h, w, c, bytes[HEADER_LEN..].to_vec()))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn write_dataset(root: &Path, scaling: &CompositeScaling, tiles: &[StoredTile]) -> Result<()> {
    fs::create_dir_all(root).at(root)?;
    let mut entries = Vec::with_capacity(tiles.len());
    for t in tiles {
        if !valid_id(&t.id) {
            return Err(Error::Config(format!("tile id {:?} is not usable as a file name", t.id)));
        }
        let (h, w) = (t.tile.height(), t.tile.width());
        write_raster(&raster_path(root, "vv", &t.id), h, w, 1, &f32_bytes(t.tile.vv()))?;
        write_raster(&raster_path(root, "vh", &t.id), h, w, 1, &f32_bytes(t.tile.vh()))?;
        write_raster(&raster_path(root, label_kind(t.tier), &t.id), h, w, 1, t.mask.labels())?;
        let valid: Vec<u8> = t.tile.valid().iter().map(|v| u8::from(*v)).collect();
        write_raster(&raster_path(root, "valid", &t.id), h, w, 1, &valid)?;
        entries.push(ManifestEntry {
            id: t.id.clone(),
            split: t.split.as_str().into(),
            region: t.region.clone(),
            tier: tier_str(t.tier).into(),
            flood_present: t.mask.any_flooded(),
        });
    }
    let manifest = Manifest { format_version: MANIFEST_VERSION, scaling: (*scaling).into(), tiles: entries };
    write_json(&root.join(MANIFEST), &manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.clone(), section: "manifest", reason: e.to_string() })?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Format { path, section: "manifest", reason: format!("unsupported version {}", m.format_version) });
    }
    Ok(m)
}

fn read_plane(root: &Path, kind: &str, id: &str, elem: usize) -> Result<(usize, usize, Vec<u8>)> {
    let path = raster_path(root, kind, id);
    let (h, w, c, payload) = read_raster(&path, elem)?;
    if c != 1 {
        return Err(Error::Format { path, section: "raster header", reason: format!("expected 1 channel, found {c}") });
    }
    Ok((h, w, payload))
}

pub fn read_dataset(root: &Path) -> Result<(CompositeScaling, Vec<StoredTile>)> {
    let manifest = read_manifest(root)?;
    let mpath = root.join(MANIFEST);
    let mut tiles = Vec::with_capacity(manifest.tiles.len());
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.tiles {
        let bad = |reason: String| Error::Format { path: mpath.clone(), section: "manifest", reason };
        if !valid_id(&e.id) {
            return Err(bad(format!("tile id {:?} is not usable as a file name", e.id)));
        }
        let split = Split::parse(&e.split).ok_or_else(|| bad(format!("unknown split {:?}", e.split)))?;
        let tier = match e.tier.as_str() {
            "high" => ConfidenceTier::High,
            "low" => ConfidenceTier::Low,
            other => return Err(bad(format!("unknown tier {other:?}"))),
        };
        if !seen.insert((split, tier, e.id.as_str())) {
            return Err(bad(format!("tile {} is listed twice", e.id)));
        }
        let (h, w, vv) = read_plane(root, "vv", &e.id, 4)?;
        let (h2, w2, vh) = read_plane(root, "vh", &e.id, 4)?;
        let (h3, w3, mask) = read_plane(root, label_kind(tier), &e.id, 1)?;
        let (h4, w4, valid) = read_plane(root, "valid", &e.id, 1)?;
        if [(h2, w2), (h3, w3), (h4, w4)].iter().any(|d| *d != (h, w)) {
            return Err(bad(format!("tile {} has rasters of different sizes", e.id)));
        }
        let tile = TilePair::new(h, w, f32_values(&vv), f32_values(&vh), valid.iter().map(|v| *v != 0).collect())?;
        let mask = GroundTruthMask::new(h, w, mask)?;
        if mask.any_flooded() != e.flood_present {
            return Err(bad(format!("tile {}: flood_present disagrees with its mask", e.id)));
        }
        tiles.push(StoredTile { id: e.id.clone(), split, region: e.region.clone(), tier, tile, mask });
    }
    Ok((manifest.scaling.into(), tiles))
}

/// Composites the tiles of one split into an index, dropping swath-gap tiles
/// below `min_valid_fraction` when requested.
pub fn index_of(tiles: &[StoredTile], split: Split, scaling: &CompositeScaling, min_valid_fraction: Option<f64>) -> Result<DatasetIndex> {
    let examples = tiles
        .iter()
        .filter(|t| t.split == split)
        .map(|t| t.example(scaling).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex::new(split, examples)?;
    Ok(match min_valid_fraction {
        Some(f) => filter_swath_gaps(&index, f)?,
        None => index,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, section: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), section, reason: e.to_string() })
}

/// Two-class probabilities as a 2-channel f32 raster.
pub fn write_probs(path: &Path, probs: &ProbabilityMap) -> Result<()> {
    let values: Vec<f32> = probs.data().iter().map(|v| *v as f32).collect();
    write_raster(path, probs.height(), probs.width(), 2, &f32_bytes(&values))
}

pub fn read_probs(path: &Path) -> Result<ProbabilityMap> {
    let (h, w, c, payload) = read_raster(path, 4)?;
    if c != 2 {
        return Err(Error::Format { path: path.to_path_buf(), section: "raster header", reason: format!("expected 2 channels, found {c}") });
    }
    let mut data: Vec<f64> = f32_values(&payload).into_iter().map(f64::from).collect();
    let n = h * w;
    for i in 0..n {
        let s = data[i] + data[n + i];
        if s > 0.0 {
            data[i] /= s;
            data[n + i] /= s;
        }
    }
    Ok(ProbabilityMap::new(h, w, data)?)
}

/// Mask as an 8-bit grayscale PNG: 0 dry, 255 flooded.
pub fn write_mask_png(path: &Path, mask: &GroundTruthMask) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = mask.labels().iter().map(|v| v * 255).collect();
    let encode = |e: png::EncodingError| Error::Runtime(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(encode)?;
    writer.write_image_data(&pixels).map_err(encode)?;
    writer.finish().map_err(encode)
}

/// Reads an 8-bit grayscale PNG; values of 128 and above are flooded.
pub fn read_mask_png(path: &Path) -> Result<GroundTruthMask> {
    let file = fs::File::open(path).at(path)?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), section: "png", reason };
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let labels = buf[..w * h].iter().map(|v| u8::from(*v >= 128)).collect();
    Ok(GroundTruthMask::new(h, w, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sslseg_core::synth::{default_scaling, generate_tiles, GeneratorSpec};

    fn tiles() -> Vec<StoredTile> {
        let spec = GeneratorSpec { tile_size: 8, tile_count: 5, swath_gap_rate: 0.5, ..GeneratorSpec::default() };
        generate_tiles(&spec, 4)
            .unwrap()
            .into_iter()
            .map(|t| StoredTile {
                id: t.id,
                split: Split::Train,
                region: "region-a".into(),
                tier: ConfidenceTier::High,
                tile: t.tile,
                mask: t.mask,
            })
            .collect()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = tiles();
        write_dataset(dir.path(), &default_scaling(), &t).unwrap();
        let (scaling, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(scaling, default_scaling());
        assert_eq!(back, t);
        let bytes = fs::read(raster_path(dir.path(), "vv", &t[0].id)).unwrap();
        assert_eq!(&bytes[..4], b"SSLT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
        assert_eq!(bytes.len(), 16 + 8 * 8 * 4);
    }

    #[test]
    fn truncated_raster_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let t = tiles();
        write_dataset(dir.path(), &default_scaling(), &t).unwrap();
        let p = raster_path(dir.path(), "vh", &t[1].id);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { section: "raster payload", .. }), "{err}");
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(read_dataset(dir.path()).unwrap_err(), Error::Format { section: "raster header", .. }));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = GroundTruthMask::new(3, 4, vec![0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 1, 1]).unwrap();
        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);
    }

    #[test]
    fn probs_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let probs = ProbabilityMap::new(1, 3, vec![0.25, 0.5, 0.9, 0.75, 0.5, 0.1]).unwrap();
        let p = dir.path().join("p.bin");
        write_probs(&p, &probs).unwrap();
        let back = read_probs(&p).unwrap();
        for (a, b) in back.data().iter().zip(probs.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn bad_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = tiles();
        t[0].id = "../escape".into();
        assert!(write_dataset(dir.path(), &default_scaling(), &t).is_err());
    }
}
