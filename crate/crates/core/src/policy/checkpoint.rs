//! Versioned binary checkpoint: a JSON metadata header followed by a sorted
//! map of named `f32` arrays, all little-endian.
//!
//! ```text
//! "SUBQCKPT" | version u32 | header_len u32 | header json
//! entry_count u32 | { key_len u32 | key utf8 | len u32 | len × f32 }*
//! ```

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SUBQCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on checkpoint: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub feature_names: Vec<String>,
    pub span_cap: usize,
    pub temperature: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_f64(&mut self, key: &str, values: &[f64]) {
        self.tensors
            .insert(key.to_string(), values.iter().map(|&v| v as f32).collect());
    }

    pub fn get_f64(&self, key: &str) -> Option<Vec<f64>> {
        self.tensors.get(key).map(|v| v.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_len(&mut out, header.len())?;
        out.extend_from_slice(&header);
        put_len(&mut out, self.tensors.len())?;
        for (key, values) in &self.tensors {
            put_len(&mut out, key.len())?;
            out.extend_from_slice(key.as_bytes());
            put_len(&mut out, values.len())?;
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let key_len = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(key_len)?)
                .map_err(|e| CheckpointError::Malformed(format!("key is not utf-8: {e}")))?
                .to_string();
            let len = r.u32()? as usize;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| malformed("tensor too large"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(key.clone(), values).is_some() {
                return Err(malformed(&format!("duplicate key `{key}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }
}

fn malformed(msg: &str) -> CheckpointError {
    CheckpointError::Malformed(msg.to_string())
}

fn put_len(out: &mut Vec<u8>, len: usize) -> Result<(), CheckpointError> {
    let len = u32::try_from(len).map_err(|_| malformed("length exceeds u32"))?;
    out.extend_from_slice(&len.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed("unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta {
            feature_names: vec!["a".into(), "b".into()],
            span_cap: 8,
            temperature: 1.0,
            step: 3,
        });
        c.insert_f64("policy.theta", &[0.5, -1.25]);
        c.insert_f64("aux.sp.b", &[]);
        c
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &sample()).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.get_f64("policy.theta").unwrap(), vec![0.5, -1.25]);
    }

    #[test]
    fn encoding_is_stable() {
        assert_eq!(sample().to_bytes().unwrap(), sample().to_bytes().unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Malformed(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::UnsupportedVersion(2))));
    }
}
