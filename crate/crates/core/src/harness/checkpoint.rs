//! Binary checkpoint format.
//!
//! ```text
//! "CYCG" | version u32 | vocab hash u64 | config len u32 | config JSON
//! tensor count u32 | per tensor: name len u16, name, rank u8, dims u32 x rank, f64 x prod(dims)
//! optimizer flag u8 | if 1: steps u64 x 3, m f64 x P, v f64 x P
//! ```
//!
//! Every integer and float is little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, OptimState, Policy};
use crate::tokenizer::vocab_hash;

pub const MAGIC: &[u8; 4] = b"CYCG";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(policy: &Policy, opt: Option<&OptimState>, hash: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(policy.num_params() * 8 * if opt.is_some() { 3 } else { 1 } + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&hash.to_le_bytes());
    let config = serde_json::to_vec(policy.config())?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(policy.specs().len() as u32).to_le_bytes());
    for spec in policy.specs() {
        buf.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.push(spec.shape.len() as u8);
        for &d in &spec.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &policy.params()[spec.range()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match opt {
        None => buf.push(0),
        Some(state) => {
            if state.m.len() != policy.num_params() || state.v.len() != policy.num_params() {
                return Err(Error::Contract("optimizer state does not match the policy".into()));
            }
            buf.push(1);
            for s in state.steps {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            for v in state.m.iter().chain(&state.v) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(policy: &Policy, opt: Option<&OptimState>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(policy, opt, vocab_hash())?;
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{what} too large")))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], expected_hash: u64) -> Result<(Policy, Option<OptimState>)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a CYCG checkpoint".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version mismatch: file has {version}, loader supports {FORMAT_VERSION}"
        )));
    }
    let hash = c.u64("vocab hash")?;
    if hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "vocab hash mismatch: file has {hash:016x}, loader has {expected_hash:016x}"
        )));
    }
    let clen = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(clen, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    config.validate()?;
    let specs = config.param_specs();
    let count = c.u32("tensor count")? as usize;
    if count != specs.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: file has {count}, config implies {}",
            specs.len()
        )));
    }
    let mut params = vec![0.0; config.num_params()];
    for spec in &specs {
        let nlen = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", spec.name)));
        }
        let rank = c.u8("rank")? as usize;
        let dims = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dims {dims:?}, config implies {:?}",
                spec.shape
            )));
        }
        let values = c.f64s(spec.len, name)?;
        params[spec.range()].copy_from_slice(&values);
    }
    let opt = match c.u8("optimizer flag")? {
        0 => None,
        1 => {
            let steps = [c.u64("steps")?, c.u64("steps")?, c.u64("steps")?];
            let m = c.f64s(params.len(), "first moments")?;
            let v = c.f64s(params.len(), "second moments")?;
            Some(OptimState { m, v, steps })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if c.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    let policy = Policy::from_params(config, params)?;
    if !policy.is_finite() {
        return Err(Error::Checkpoint("checkpoint holds non-finite parameters".into()));
    }
    Ok((policy, opt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Policy, Option<OptimState>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, vocab_hash())
}
