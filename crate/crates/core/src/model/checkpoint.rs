//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RDAR" | u32 version | u8 arch tag | u32 block count
//! per block: u16 name length | name bytes | u32 rows | u32 cols
//! u64 parameter count | f64 parameters | u32 CRC-32 of all preceding bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Architecture, ModelParams, ParamBlock};
use crate::error::{RdarError, Result};

pub const MAGIC: &[u8; 4] = b"RDAR";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(params.arch.tag());
    out.extend_from_slice(&(params.layout.len() as u32).to_le_bytes());
    for b in &params.layout {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.rows as u32).to_le_bytes());
        out.extend_from_slice(&(b.cols as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(RdarError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 4 + 4 || &bytes[..4] != MAGIC {
        return Err(RdarError::Checkpoint("bad magic".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let crc = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(RdarError::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(RdarError::Checkpoint(format!("unsupported version {version}")));
    }
    let tag = r.take(1)?[0];
    let arch = Architecture::from_tag(tag).ok_or_else(|| RdarError::Checkpoint(format!("unknown architecture tag {tag}")))?;
    let n_blocks = r.u32()? as usize;
    let mut layout = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| RdarError::Checkpoint("block name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        layout.push(ParamBlock { name, rows, cols });
    }
    let n = r.u64()? as usize;
    let raw = r.take(n.checked_mul(8).ok_or_else(|| RdarError::Checkpoint("bad parameter count".into()))?)?;
    if r.pos != body.len() {
        return Err(RdarError::Checkpoint("trailing bytes".into()));
    }
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let params = ModelParams { arch, layout, values };
    params
        .validate()
        .map_err(|e| RdarError::Checkpoint(format!("inconsistent contents: {e}")))?;
    Ok(params)
}

/// Writes atomically through a temporary sibling file.
pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| RdarError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
