//! Portable parameter checkpoints.
//!
//! Layout: magic "FFCK", version u32, header length u32, header JSON
//! (the model config), tensor table (count, then name/shape per tensor),
//! then the tensor blobs as little-endian f32 in table order.

use crate::error::{Error, Result};
use crate::net::{ModelConfig, ParamSet};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FFCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for (name, tensor) in &params.entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, tensor) in &params.entries {
        for &v in &tensor.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    // write via a temp file so a failed write never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { data: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header = r.take(header_len)?;
    let config: ModelConfig = serde_json::from_slice(header)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        table.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let blob = r.take(n * 4)?;
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.entries.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor blobs",
            bytes.len() - r.pos
        )));
    }
    Ok((config, params))
}

/// Load and insist the stored config matches `expected`, naming the first
/// differing field.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ParamSet> {
    let (config, params) = load_checkpoint(path)?;
    if &config != expected {
        let a = serde_json::to_value(&config).unwrap();
        let b = serde_json::to_value(expected).unwrap();
        if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
            for (key, av) in a {
                if b.get(key) != Some(av) {
                    return Err(Error::Checkpoint(format!(
                        "config mismatch on field '{key}': checkpoint has {av}, expected {}",
                        b.get(key).cloned().unwrap_or_default()
                    )));
                }
            }
        }
        return Err(Error::Checkpoint("config mismatch".into()));
    }
    Ok(params)
}
