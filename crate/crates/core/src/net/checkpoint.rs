//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MRLCKPT\0"
//! version      u32
//! meta_len     u32       followed by meta_len bytes of UTF-8 JSON metadata
//! n_tensors    u32
//! directory    n_tensors × { name_len u16, name bytes, rows u32, cols u32 }
//! payload      for each directory entry, rows·cols f64 values, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, TENSOR_NAMES, TENSOR_SHAPES};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// "base", "R", "U", "RU", "rm", ...
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
}

impl CheckpointMeta {
    pub fn new(stage: impl Into<String>, step: u64, config_hash: impl Into<String>) -> Self {
        CheckpointMeta {
            schema_version: CHECKPOINT_VERSION,
            stage: stage.into(),
            step,
            config_hash: config_hash.into(),
        }
    }
}

pub fn encode_checkpoint(params: &ParamSet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(8 * params.n_coords() + 512);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
    }
    for (_, t) in &tensors {
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let n = r.u32()? as usize;
    if n != TENSOR_NAMES.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {n}",
            TENSOR_NAMES.len()
        )));
    }
    for i in 0..n {
        let name_len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let shape = (r.u32()? as usize, r.u32()? as usize);
        if name != TENSOR_NAMES[i] || shape != TENSOR_SHAPES[i] {
            return Err(Error::Checkpoint(format!(
                "directory entry {i}: found `{name}` {shape:?}, expected `{}` {:?}",
                TENSOR_NAMES[i], TENSOR_SHAPES[i]
            )));
        }
    }
    let mut params = ParamSet::zeros();
    for (_, t) in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ParamSet::random(&mut rng::stream(5, &[]), 1.0);
        let meta = CheckpointMeta::new("base", 3000, "abc123");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        for ((_, a), (_, b)) in p.tensors().iter().zip(q.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(
            std::fs::read(&path).unwrap(),
            encode_checkpoint(&q, &m).unwrap()
        );
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes =
            encode_checkpoint(&ParamSet::zeros(), &CheckpointMeta::new("base", 0, "")).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CheckpointVersion { found: 7, .. })
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes =
            encode_checkpoint(&ParamSet::zeros(), &CheckpointMeta::new("base", 0, "")).unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes =
            encode_checkpoint(&ParamSet::zeros(), &CheckpointMeta::new("base", 0, "")).unwrap();
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
