//! Versioned binary container: a JSON manifest followed by named f64 arrays.
//!
//! Used for model checkpoints and memory-bank files. Arrays are stored as
//! little-endian f64 bit patterns, so save/load round trips are bit-exact.
//! Writers sort arrays by name, making the byte stream a deterministic
//! function of its contents.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PADKBIN1";

/// Serialize a manifest and named arrays into container bytes.
pub fn to_bytes(manifest_json: &[u8], arrays: &[(String, ArrayD<f64>)]) -> Vec<u8> {
    let mut sorted: Vec<&(String, ArrayD<f64>)> = arrays.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest_json);
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, arr) in sorted {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(arr.ndim() as u8);
        for d in arr.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let flat = arr.as_standard_layout();
        for v in flat.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                what: "container",
                reason: "truncated file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse container bytes into (manifest bytes, named arrays).
pub fn from_bytes(bytes: &[u8]) -> Result<(Vec<u8>, Vec<(String, ArrayD<f64>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format {
            what: "container",
            reason: "bad magic; not a padkit container".into(),
        });
    }
    let mlen = r.u32()? as usize;
    let manifest = r.take(mlen)?.to_vec();
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format {
            what: "container",
            reason: "array name is not utf-8".into(),
        })?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format {
            what: "container",
            reason: e.to_string(),
        })?;
        arrays.push((name, arr));
    }
    Ok((manifest, arrays))
}

/// Write bytes atomically: to a temp sibling, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "artifact".into());
    let tmp = dir.join(format!(".{stem}.tmp.{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, manifest_json: &[u8], arrays: &[(String, ArrayD<f64>)]) -> Result<()> {
    write_atomic(path, &to_bytes(manifest_json, arrays))
}

pub fn load(path: &Path) -> Result<(Vec<u8>, Vec<(String, ArrayD<f64>)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
