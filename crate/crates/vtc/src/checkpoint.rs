//! Named-tensor checkpoint container.
//!
//! Layout, all little-endian:
//!   magic "UCKP" | version u32 | count u32 | entries...
//! and per entry:
//!   name_len u32 | name utf-8 | dtype u8 (0 = f32) | rank u8 | dims u32 x rank
//!   | payload f32 row-major
//!
//! Entries are written sorted by name, so identical state always produces
//! identical bytes. Values are cast f64 -> f32 on write and back on read;
//! save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"UCKP";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn checkpoint_bytes(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut entries: Vec<&(String, Tensor)> = tensors.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(tensor.dims().len() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, checkpoint_bytes(tensors))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                offset: self.offset as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            detail: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for entry in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint {
                offset: (r.offset - name_len) as u64,
                detail: format!("entry {entry}: name is not valid UTF-8"),
            })?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint {
                offset: (r.offset - 1) as u64,
                detail: format!("entry {name}: unsupported dtype code {dtype}"),
            });
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::from_vec(dims, data).map_err(|e| Error::Checkpoint {
            offset: r.offset as u64,
            detail: format!("entry {name}: {e}"),
        })?;
        out.push((name, tensor));
    }
    if r.offset != bytes.len() {
        return Err(Error::Checkpoint {
            offset: r.offset as u64,
            detail: format!(
                "{} trailing bytes after the declared entries",
                bytes.len() - r.offset
            ),
        });
    }
    Ok(out)
}
