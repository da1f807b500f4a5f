//! Binary container for parameters and sample dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SYMVAE01"
//! repeated: u32 name_len | name (UTF-8) | u32 rank | rank x u64 dims | prod(dims) x f64
//! u32 CRC32 of every preceding byte
//! ```
//!
//! A model checkpoint holds two segments per parametric map: `<map>#layers`
//! with the layer sizes and `<map>` with the packed parameters.

use std::path::Path;

use symvae::equilibrium::ModelSet;

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"SYMVAE01";

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Segment {
    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self { name: name.into(), dims: vec![data.len() as u64], data }
    }
}

pub fn encode(segments: &[Segment]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for s in segments {
        debug_assert_eq!(s.dims.iter().product::<u64>(), s.data.len() as u64);
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for d in &s.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &s.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(HarnessError::Truncated {
            expected: self.pos as u64 + n as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Segment>> {
    let min = MAGIC.len() + 4;
    if bytes.len() < min {
        return Err(HarnessError::Truncated { expected: min as u64, actual: bytes.len() as u64 });
    }
    if &bytes[..8] != MAGIC {
        return Err(HarnessError::Format { offset: 0, message: "missing SYMVAE01 magic".into() });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(HarnessError::Format { offset: body_end as u64, message: "CRC32 mismatch".into() });
    }
    let mut r = Reader { bytes: &bytes[..body_end], pos: 8 };
    let mut out = Vec::new();
    while r.pos < body_end {
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| HarnessError::Format { offset: at + 4, message: "segment name is not UTF-8".into() })?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let count = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|c| usize::try_from(c).ok())
            .and_then(|c| c.checked_mul(8).map(|_| c))
            .ok_or_else(|| HarnessError::Format { offset: at, message: format!("dimensions of `{name}` overflow") })?;
        let data = r.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Segment { name, dims, data });
    }
    Ok(out)
}

pub fn write_container(path: &Path, segments: &[Segment]) -> Result<()> {
    std::fs::write(path, encode(segments)).map_err(io_err(path))
}

pub fn read_container(path: &Path) -> Result<Vec<Segment>> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

fn map_name(block: &str, sub: &str) -> String {
    if sub.is_empty() {
        block.to_string()
    } else {
        format!("{block}/{sub}")
    }
}

/// Segments for every parametric map of every block, in block order.
pub fn model_segments(models: &ModelSet) -> Vec<Segment> {
    let mut out = Vec::new();
    for b in &models.blocks {
        for (sub, map) in b.block.maps() {
            let name = map_name(&b.name, &sub);
            out.push(Segment::vector(format!("{name}#layers"), map.layer_sizes().iter().map(|&s| s as f64).collect()));
            out.push(Segment::vector(name, map.params().to_vec()));
        }
    }
    out
}

/// Loads parameters into models of the same architecture.
pub fn restore_models(models: &mut ModelSet, segments: &[Segment]) -> Result<()> {
    let find = |name: &str| {
        segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| HarnessError::Checkpoint(format!("no segment `{name}`")))
    };
    for b in &mut models.blocks {
        let mut params = Vec::with_capacity(b.block.param_len());
        for (sub, map) in b.block.maps() {
            let name = map_name(&b.name, &sub);
            let layers: Vec<usize> = find(&format!("{name}#layers"))?.data.iter().map(|&s| s as usize).collect();
            if layers != map.layer_sizes() {
                return Err(HarnessError::Checkpoint(format!(
                    "`{name}` has layers {layers:?}, the model expects {:?}",
                    map.layer_sizes()
                )));
            }
            let p = find(&name)?;
            if p.data.len() != map.param_len() {
                return Err(HarnessError::Checkpoint(format!("`{name}` has {} parameters", p.data.len())));
            }
            params.extend_from_slice(&p.data);
        }
        b.block.read_params(&params).map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", b.name)))?;
    }
    Ok(())
}

pub fn save_models(path: &Path, models: &ModelSet) -> Result<()> {
    write_container(path, &model_segments(models))
}

pub fn load_models(path: &Path, models: &mut ModelSet) -> Result<()> {
    restore_models(models, &read_container(path)?)
}
