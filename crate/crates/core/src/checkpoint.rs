//! Single-file model checkpoints.
//!
//! Layout: magic, u32 format version, u64-prefixed TOML metadata, u64 array
//! count, then per array a u32-prefixed name, a dtype byte, a u32 rank, u64
//! dims and little-endian values. A SHA-256 of everything before it closes the
//! file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CopsError, Result};
use crate::model::CopsModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"COPSCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    config: RunConfig,
}

/// Run configuration plus every named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &CopsModel) -> Self {
        let arrays = model.all_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Self { config: model.config.clone(), arrays }
    }

    /// Rebuild the model; every parameter must be present with its exact shape.
    pub fn into_model(self) -> Result<CopsModel> {
        let mut model = CopsModel::new(self.config)?;
        let mut arrays: BTreeMap<String, Tensor> = self.arrays.into_iter().collect();
        for (name, slot) in model.all_params_mut() {
            let t = arrays.remove(&name).ok_or_else(|| CopsError::Checkpoint(format!("missing array {name}")))?;
            if t.shape() != slot.shape() {
                return Err(CopsError::Checkpoint(format!(
                    "array {name} is {}x{}, model expects {}x{}",
                    t.rows(),
                    t.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(CopsError::Checkpoint(format!("unexpected array {extra}")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = toml::to_string(&Metadata { format_version: FORMAT_VERSION, config: self.config.clone() })
            .expect("metadata always serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| CopsError::Checkpoint(why.to_string());
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CopsError::Checkpoint(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; file is truncated or corrupt"));
        }
        let mut cur = Cursor { buf: body, pos: 12 };
        let meta_len = cur.u64()? as usize;
        let meta_text = std::str::from_utf8(cur.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?;
        let meta: Metadata = toml::from_str(meta_text).map_err(|e| CopsError::Checkpoint(format!("metadata: {e}")))?;
        if meta.format_version != version {
            return Err(bad("metadata version disagrees with header"));
        }
        meta.config.validate()?;
        let count = cur.u64()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| bad("array name is not UTF-8"))?;
            if cur.take(1)?[0] != DTYPE_F64 {
                return Err(CopsError::Checkpoint(format!("array {name} has an unsupported dtype")));
            }
            if cur.u32()? != 2 {
                return Err(CopsError::Checkpoint(format!("array {name} is not two-dimensional")));
            }
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some()).ok_or_else(|| bad("array too large"))?;
            let data = cur.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if cur.pos != body.len() {
            return Err(bad("trailing bytes after the last array"));
        }
        Ok(Self { config: meta.config, arrays })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CopsError::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write bytes to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CopsError::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &CopsModel) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model).to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<CopsModel> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)?.into_model()
}
