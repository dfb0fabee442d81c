//! Flat binary tensor files.
//!
//! ```text
//! magic    "CLIC1"                      5 bytes
//! count    u32 LE                       number of tensors
//! repeated count times:
//!   name_len u32 LE, name UTF-8 bytes
//!   ndim     u32 LE, dims ndim x u32 LE
//! payload  f32 LE for every tensor, in table order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::encoder::EncoderParams;
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CLIC1";

pub fn tensors_to_bytes(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn tensors_from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = cur.u32()?;
    let mut table = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string();
        let ndim = cur.u32()?;
        let dims = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    std::fs::write(path, tensors_to_bytes(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tensors_from_bytes(&bytes)
}

/// Named tensors for a parameter set, each name prefixed with `prefix`.
pub fn named_params(prefix: &str, params: &EncoderParams) -> Vec<(String, Tensor)> {
    EncoderParams::names()
        .into_iter()
        .zip(params.tensors())
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

/// Picks the parameter set stored under `prefix` out of a tensor list.
pub fn params_from_named(named: &[(String, Tensor)], prefix: &str) -> Result<EncoderParams> {
    let tensors = EncoderParams::names()
        .iter()
        .map(|n| {
            let key = format!("{prefix}{n}");
            named
                .iter()
                .find(|(name, _)| *name == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    EncoderParams::from_tensors(tensors)
}

pub fn save_encoder(path: &Path, params: &EncoderParams) -> Result<()> {
    let named = named_params("", params);
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_tensors(path, &refs)
}

/// Loads an encoder from a bare parameter file or from a training
/// checkpoint (where the query encoder lives under `query.`).
pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let named = read_tensors(path)?;
    params_from_named(&named, "").or_else(|_| params_from_named(&named, "query."))
}
