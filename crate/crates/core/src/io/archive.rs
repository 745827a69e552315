//! Flat binary weight archive.
//!
//! ```text
//! "SPKW" | version u16 | entry count u32
//! per entry: name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 * ndim
//! payload: every entry's values as f32, in entry order
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, SpikingTransformer};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SPKW";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(entries: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for (_, t) in entries {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<ArchiveEntry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a weight archive".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut header = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("entry {i} name is not utf-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("entry {name}: unknown dtype {dtype}")));
        }
        let ndim = r.u8("rank")? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(Error::Format(format!("entry {name}: rank {ndim}")));
        }
        let dims = (0..ndim)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        header.push((name, dims));
    }
    let mut entries = Vec::with_capacity(header.len());
    for (name, dims) in header {
        let bytes = dims
            .iter()
            .try_fold(4usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {name}: extents {dims:?} overflow")))?;
        let raw = r.take(bytes, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("entry {name}: {e}")))?;
        entries.push(ArchiveEntry { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn encode_weights(weights: &ModelWeights) -> Result<Vec<u8>> {
    encode(&weights.named_tensors())
}

/// Rebuilds weights for `cfg`; names and shapes must match exactly.
pub fn decode_weights(bytes: &[u8], cfg: &ModelConfig) -> Result<SpikingTransformer> {
    let entries = decode(bytes)?;
    let mut weights = ModelWeights::init(cfg, 0);
    let expected: Vec<(String, Vec<usize>)> = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != entries.len() {
        return Err(Error::config(
            "model",
            format!(
                "archive holds {} tensors, config implies {}",
                entries.len(),
                expected.len()
            ),
        ));
    }
    for ((name, shape), (slot, e)) in expected.iter().zip(weights.tensors_mut().into_iter().zip(entries)) {
        if &e.name != name || e.tensor.shape() != shape.as_slice() {
            return Err(Error::config(
                e.name.clone(),
                format!("archive has {:?}, config expects {name} {shape:?}", e.tensor.shape()),
            ));
        }
        *slot = e.tensor;
    }
    SpikingTransformer::from_weights(cfg.clone(), weights)
}

pub fn save_weights(model: &SpikingTransformer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(&model.weights)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<SpikingTransformer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    decode_weights(&bytes, cfg)
}
