//! Self-describing model checkpoints.
//!
//! Layout: the 8-byte magic `SSLCKPT\0`, a little-endian u32 format version,
//! then tagged sections `[tag: 4 bytes][len: u64][payload]`:
//! `CONF` (JSON model config and seed), `TENS` (named f32 tensors) and an
//! empty `END\0`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sslseg_core::model::{UNet, UNetConfig, Variant};
use sslseg_core::tensor::Tensor;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: [u8; 8] = *b"SSLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    variant: String,
    encoder_widths: Vec<usize>,
    pointwise_heavy: bool,
    expansion: usize,
    seed: u64,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn encode(model: &UNet) -> Vec<u8> {
    let cfg = model.config();
    let record = ConfigRecord {
        variant: cfg.variant.as_str().into(),
        encoder_widths: cfg.encoder_widths.clone(),
        pointwise_heavy: cfg.pointwise_heavy,
        expansion: cfg.expansion,
        seed: model.seed(),
    };
    let mut tensors = Vec::new();
    tensors.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        tensors.extend_from_slice(&(name.len() as u16).to_le_bytes());
        tensors.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            tensors.extend_from_slice(&(d as u32).to_le_bytes());
        }
        tensors.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    section(&mut out, b"CONF", &serde_json::to_vec(&record).expect("plain record"));
    section(&mut out, b"TENS", &tensors);
    section(&mut out, b"END\0", &[]);
    out
}

pub fn save_checkpoint(model: &UNet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, encode(model)).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<UNet> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes).map_err(|(section, reason)| Error::Format { path: path.to_path_buf(), section, reason })
}

/// Every `*.ckpt` in `dir`, by file name, as `(stem, model)` pairs.
pub fn load_checkpoint_dir(dir: &Path) -> Result<Vec<(String, UNet)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .ckpt files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((stem, load_checkpoint(p)?))
        })
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

type Failure = (&'static str, String);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Failure> {
        if self.bytes.len() - self.pos < n {
            return Err((self.section, format!("truncated: needed {n} bytes at offset {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u16(&mut self) -> Result<u16, Failure> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, Failure> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Failure> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self, tag: &[u8; 4], name: &'static str) -> Result<&'a [u8], Failure> {
        self.section = name;
        let found = self.take(4)?;
        if found != tag {
            return Err((name, format!("expected tag {:?}, found {:?}", String::from_utf8_lossy(tag), String::from_utf8_lossy(found))));
        }
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| (name, "length overflows".to_string()))?;
        self.take(len)
    }
}

fn decode(bytes: &[u8]) -> Result<UNet, Failure> {
    let mut c = Cursor { bytes, pos: 0, section: "header" };
    if c.take(8)? != MAGIC {
        return Err(("header", "not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(("header", format!("unsupported format version {version}")));
    }
    let conf = c.section(b"CONF", "config")?;
    let record: ConfigRecord = serde_json::from_slice(conf).map_err(|e| ("config", e.to_string()))?;
    let variant = Variant::parse(&record.variant).ok_or(("config", format!("unknown variant {:?}", record.variant)))?;
    let config = UNetConfig {
        variant,
        encoder_widths: record.encoder_widths,
        pointwise_heavy: record.pointwise_heavy,
        expansion: record.expansion,
    };
    let payload = c.section(b"TENS", "tensors")?;
    c.section(b"END\0", "trailer")?;
    if c.pos != bytes.len() {
        return Err(("trailer", format!("{} unexpected bytes after the end marker", bytes.len() - c.pos)));
    }
    let mut t = Cursor { bytes: payload, pos: 0, section: "tensors" };
    let count = t.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = t.u16()? as usize;
        let name = std::str::from_utf8(t.take(len)?).map_err(|e| ("tensors", e.to_string()))?.to_string();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = t.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let data = t.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        entries.push((name, Tensor::from_vec(shape, data).map_err(|e| ("tensors", e.to_string()))?));
    }
    if t.pos != payload.len() {
        return Err(("tensors", "trailing bytes after the last tensor".into()));
    }
    UNet::from_parts(&config, record.seed, entries).map_err(|e| ("tensors", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sslseg_core::model::{build_model, SegmentationModel};

    fn model() -> UNet {
        let cfg = UNetConfig { encoder_widths: vec![4, 8], ..UNetConfig::default() }.with_variant(Variant::UNetPlusPlus);
        build_model(&cfg, 21).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.seed(), 21);
        assert_eq!(back.params().values(), m.params().values());
        let x = Tensor::from_vec([1, 3, 6, 6], (0..108).map(|i| i as f32 / 108.0).collect()).unwrap();
        assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn truncation_names_the_section() {
        let bytes = encode(&model());
        let cases = [(4, "header"), (20, "config"), (bytes.len() - 40, "tensors"), (bytes.len() - 3, "trailer")];
        for (cut, want) in cases {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert_eq!(err.0, want, "cut at {cut}: {}", err.1);
        }
    }

    #[test]
    fn corrupt_config_and_magic() {
        let mut bytes = encode(&model());
        bytes[0] = b'X';
        assert_eq!(decode(&bytes).unwrap_err().0, "header");
        let mut bytes = encode(&model());
        bytes[24] = b'!';
        assert_eq!(decode(&bytes).unwrap_err().0, "config");
    }
}
