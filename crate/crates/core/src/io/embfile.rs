//! Binary embedding files.
//!
//! Layout (little-endian): magic `FMEB`, version `u32`, dim `u32`, control
//! code tag `u8`, row count `u64`, producer length `u32` and UTF-8 bytes, then
//! per row: id length `u32`, id bytes, `dim` × `f64`. Rows are sorted by id.

use std::path::Path;

use super::IoError;
use crate::embeddings::EmbeddingMatrix;
use crate::types::ControlCode;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FMEB";
pub const EMBEDDING_VERSION: u32 = 1;

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(32 + m.rows.len() * (16 + 8 * m.dim));
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(m.dim).map_err(|_| "dimension too large")?.to_le_bytes());
    out.push(m.code.index() as u8);
    out.extend_from_slice(&(m.rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m.producer.len() as u32).to_le_bytes());
    out.extend_from_slice(m.producer.as_bytes());
    for (id, row) in &m.rows {
        if row.len() != m.dim {
            return Err(format!("row `{id}` has {} values, expected {}", row.len(), m.dim));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(format!("truncated {what} at byte {}", self.pos));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format!("{what} is not UTF-8"))
    }
}

pub fn decode_embeddings(buf: &[u8]) -> Result<EmbeddingMatrix, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != EMBEDDING_MAGIC {
        return Err("not an embedding file (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(format!("unsupported embedding file version {version}"));
    }
    let dim = r.u32("dimension")? as usize;
    let tag = r.take(1, "format tag")?[0] as usize;
    let code = *ControlCode::ALL.get(tag).ok_or_else(|| format!("unknown format tag {tag}"))?;
    let count = r.u64("row count")?;
    let producer = r.string("producer")?;
    // Each row needs at least its length prefix and values.
    let min_row = 4 + 8 * dim as u64;
    if count.saturating_mul(min_row) > (buf.len() - r.pos) as u64 {
        return Err(format!("header announces {count} rows of dimension {dim}, more than the file holds"));
    }
    let mut m = EmbeddingMatrix::new(code, dim, producer);
    let mut last: Option<String> = None;
    for i in 0..count {
        let id = r.string("row id")?;
        if last.as_ref().is_some_and(|l| *l >= id) {
            return Err(format!("row {i} id `{id}` is out of order or duplicated"));
        }
        let raw = r.take(8 * dim, "row values")?;
        let row = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        m.rows.insert(id.clone(), row);
        last = Some(id);
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes after {count} rows", buf.len() - r.pos));
    }
    Ok(m)
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), IoError> {
    let bytes = encode_embeddings(m).map_err(|e| IoError::format(path, e))?;
    std::fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_embeddings(&bytes).map_err(|e| IoError::format(path, e))
}
