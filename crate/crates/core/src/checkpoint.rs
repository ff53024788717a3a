//! Binary checkpoint: magic, version, the run config as JSON, then every
//! parameter tensor by name with its role and shape, little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::backbone::{build_model, ModelParams, Role};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PPIXCKPT";
const VERSION: u32 = 1;

pub fn encode(cfg: &RunConfig, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = cfg.to_json();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match p.role {
            Role::Frozen => 0,
            Role::Tunable => 1,
        });
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} length {n}")))
    }
}

/// Parses a checkpoint and checks every tensor against the model its config
/// describes.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, ModelParams)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let json_len = r.len("config")?;
    let json = std::str::from_utf8(r.take(json_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let cfg = RunConfig::from_json(json)?;
    let count = r.u32()? as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string();
        let role = match r.u8()? {
            0 => Role::Frozen,
            1 => Role::Tunable,
            other => return Err(Error::Checkpoint(format!("bad role byte {other} for `{name}`"))),
        };
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len("dimension")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for `{name}`")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?, role);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    check_compatible(&cfg, &params)?;
    Ok((cfg, params))
}

/// Names, order, shapes and roles must match a fresh model from `cfg`.
pub fn check_compatible(cfg: &RunConfig, params: &ModelParams) -> Result<()> {
    let expected = build_model(&cfg.backbone)?;
    for (name, p) in expected.iter() {
        let Some(got) = params.get(name) else {
            return Err(Error::Incompatible(format!("missing tensor `{name}`")));
        };
        if got.tensor.shape() != p.tensor.shape() {
            return Err(Error::Incompatible(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                got.tensor.shape(),
                p.tensor.shape()
            )));
        }
        if got.role != p.role {
            return Err(Error::Incompatible(format!("`{name}` has role {:?}, model expects {:?}", got.role, p.role)));
        }
    }
    if let Some((extra, _)) = params.iter().find(|(n, _)| !expected.contains(n)) {
        return Err(Error::Incompatible(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, cfg: &RunConfig, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(cfg, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, ModelParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
