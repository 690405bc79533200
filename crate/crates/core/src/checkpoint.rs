//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RMFN" | version u32 | sha256(config) 32 bytes
//! config_len u64 | config TOML bytes
//! param_count u64
//! per parameter: name_len u64 | name | rank u64 | extents u64* | f64 data
//! ```
//!
//! Parameters appear in initialization order, so saving a loaded model
//! reproduces the original file byte for byte.

use crate::error::{Error, Result};
use crate::model::{assemble_model, RmfnConfig, RmfnModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RMFN";
const VERSION: u32 = 1;

pub fn save(model: &RmfnModel, path: &Path) -> Result<()> {
    let config = toml::to_string(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    let config = config.as_bytes();
    let digest = Sha256::digest(config);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&digest)?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config)?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (name, p) in model.params.iter() {
        let name = name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.shape().len() as u64).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "file truncated at byte {} (needed {n} more)",
                self.pos
            )));
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

    /// A u64 that must fit a sane in-memory size.
    fn size(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > self.buf.len() as u64 * 8 {
            return Err(Error::Checkpoint(format!(
                "implausible size field {v} at byte {}",
                self.pos - 8
            )));
        }
        Ok(v as usize)
    }
}

pub fn load(path: &Path) -> Result<RmfnModel> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let stored_digest = r.take(32)?.to_vec();
    let config_len = r.size()?;
    let config_bytes = r.take(config_len)?;
    let digest = Sha256::digest(config_bytes);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint(
            "config digest mismatch (file corrupted)".into(),
        ));
    }
    let config_str = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::Checkpoint("config block is not valid UTF-8".into()))?;
    let config: RmfnConfig = toml::from_str(config_str)
        .map_err(|e| Error::Checkpoint(format!("config block does not parse: {e}")))?;

    let param_count = r.size()?;
    let mut params = ParamStore::new();
    for _ in 0..param_count {
        let name_len = r.size()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not valid UTF-8".into()))?
            .to_string();
        let rank = r.size()?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.size()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                Error::Checkpoint(format!("parameter {name:?} shape {shape:?} overflows"))
            })?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&name, Tensor::from_vec(&shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            buf.len() - r.pos
        )));
    }

    assemble_model(&config, params)
}
