//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PADFCKPT"
//! version  u32      1
//! cfg_len  u32      length of the JSON-encoded ModelConfig
//! cfg      cfg_len bytes of UTF-8 JSON
//! count    u32      number of records
//! record*  name_len u32, name (UTF-8), kind u8, ndim u32, dims u64 × ndim,
//!          payload f64 × prod(dims)
//! ```

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{ModelParams, Param, ParamKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PADFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const KINDS: [ParamKind; 9] = [
    ParamKind::ConvWeight,
    ParamKind::DenseWeight,
    ParamKind::DenseBias,
    ParamKind::BnGamma,
    ParamKind::BnBeta,
    ParamKind::BnRunningMean,
    ParamKind::BnRunningVar,
    ParamKind::SvcWeight,
    ParamKind::SvcBias,
];

fn kind_code(kind: ParamKind) -> u8 {
    KINDS.iter().position(|&k| k == kind).expect("every kind is listed") as u8
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let cfg = serde_json::to_vec(params.config()).expect("config serializes");
    let mut out =
        Vec::with_capacity(64 + cfg.len() + params.params().iter().map(|p| 8 * p.data.len() + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(kind_code(p.kind));
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.pos,
                format!("truncated checkpoint while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::parse(0, "not a padforge checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(8, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| Error::parse(cfg_at, format!("bad config header: {e}")))?;
    let count = r.u32("record count")? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::parse(name_at, "parameter name is not UTF-8"))?
            .to_string();
        let kind_at = r.pos;
        let code = r.take(1, "kind")?[0] as usize;
        let kind = *KINDS
            .get(code)
            .ok_or_else(|| Error::parse(kind_at, format!("unknown parameter kind {code}")))?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len.saturating_mul(8), "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Param {
            name,
            kind,
            shape,
            data,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes after the last record"));
    }
    ModelParams::from_parts(config, params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
