//! Binary checkpoint container shared by the proposer, steering adapters, reward
//! models, value heads and the weight predictor.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "STEERLAB"
//! version      u32
//! header_len   u32, then header_len bytes of UTF-8 JSON (configuration, vocab, metadata)
//! slice_count  u32
//! per slice:   name_len u32, name bytes, ndim u32, ndim × u64 dims, f64 data (row-major)
//! checksum     32 bytes, SHA-256 of everything before it
//! ```

use std::path::Path;

use ndarray::Array2;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autograd::ParamSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STEERLAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub slices: Vec<(String, Array2<f64>)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            header: Value::Object(Default::default()),
            slices: Vec::new(),
        }
    }

    /// Sets a header field.
    pub fn set(&mut self, key: &str, value: Value) {
        if let Value::Object(map) = &mut self.header {
            map.insert(key.to_string(), value);
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.header.get(key)
    }

    /// Appends every parameter of `params` as `prefix.name`.
    pub fn add_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, v) in params.iter() {
            self.slices.push((format!("{prefix}.{name}"), v.clone()));
        }
    }

    /// Slices whose name starts with `prefix.`, prefix stripped, in stored order.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let lead = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (name, v) in &self.slices {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.push(rest.to_string(), v.clone());
            }
        }
        out
    }

    pub fn slice(&self, name: &str) -> Option<&Array2<f64>> {
        self.slices.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("json header");
        let mut out = Vec::with_capacity(
            32 + header.len() + self.slices.iter().map(|(_, v)| 8 * v.len() + 64).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.slices.len() as u32).to_le_bytes());
        for (name, v) in &self.slices {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(v.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            msg,
        };
        if bytes.len() < MAGIC.len() + 32 {
            return Err(fail(format!("{} bytes is too short", bytes.len())));
        }
        let (bytes, sum) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(fail)? != MAGIC {
            return Err(fail("bad magic bytes".into()));
        }
        if Sha256::digest(bytes).as_slice() != sum {
            return Err(fail("checksum mismatch".into()));
        }
        let version = r.u32().map_err(fail)?;
        if version != FORMAT_VERSION {
            return Err(fail(format!("unsupported format version {version}")));
        }
        let hlen = r.u32().map_err(fail)? as usize;
        let header: Value = serde_json::from_slice(r.take(hlen).map_err(fail)?)
            .map_err(|e| fail(format!("header: {e}")))?;
        let count = r.u32().map_err(fail)?;
        let mut slices = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u32().map_err(fail)? as usize;
            let name = String::from_utf8(r.take(nlen).map_err(fail)?.to_vec())
                .map_err(|e| fail(format!("slice name: {e}")))?;
            let ndim = r.u32().map_err(fail)?;
            let dims: Vec<usize> = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<_, _>>()
                .map_err(fail)?;
            let (rows, cols) = match dims.as_slice() {
                [r] => (1, *r),
                [r, c] => (*r, *c),
                _ => return Err(fail(format!("slice `{name}` has {ndim} dims"))),
            };
            let raw = r.take(rows * cols * 8).map_err(fail)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| fail(format!("slice `{name}`: {e}")))?;
            slices.push((name, arr));
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, slices })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Digest over parameter names, shapes and exact bit patterns.
pub fn params_digest(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, v) in params.iter() {
        h.update(name.as_bytes());
        h.update((v.nrows() as u64).to_le_bytes());
        h.update((v.ncols() as u64).to_le_bytes());
        for x in v.iter() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut ck = Checkpoint::new();
        ck.set("kind", Value::from("test"));
        let mut p = ParamSet::new();
        p.push("w", array![[1.0, -0.0, f64::MIN_POSITIVE], [3.5, 1e300, -2.25]]);
        p.push("b", array![[0.1]]);
        ck.add_params("m", &p);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(params_digest(&back.params("m")), params_digest(&p));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ck = Checkpoint::new();
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
