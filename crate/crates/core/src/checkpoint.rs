//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `SFN1`, version `u32`, 32-byte config
//! digest, parameter count `u64`, then per parameter: name length `u16`,
//! UTF-8 name, rank `u8`, extents as `u32`, values as `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: ParamStore<f64>,
}

pub fn encode_checkpoint(digest: &[u8; 32], params: &ParamStore<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(48 + params.num_elements() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::contract(format!("rank of `{name}` too large")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::contract(format!("extent of `{name}` too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.array("digest")?;
    let count = u64::from_le_bytes(r.array("parameter count")?);
    let mut params = ParamStore::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(format!("parameter {i} has a non-UTF-8 name")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array("extent")?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format("extent overflow"))?, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("parameter `{name}`: {e}")))?;
        params.insert(name, t).map_err(|e| Error::format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { digest, params })
}

pub fn write_checkpoint(path: impl AsRef<Path>, digest: &[u8; 32], params: &ParamStore<f64>) -> Result<()> {
    fs::write(path, encode_checkpoint(digest, params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Reads a checkpoint and checks it was written for a configuration with
/// `expected` digest and matching parameter layout.
pub fn load_for(path: impl AsRef<Path>, expected: &[u8; 32], layout: &ParamStore<f64>) -> Result<ParamStore<f64>> {
    let ck = read_checkpoint(path)?;
    if &ck.digest != expected {
        return Err(Error::Checkpoint(format!(
            "config digest {} does not match expected {}",
            hex(&ck.digest),
            hex(expected)
        )));
    }
    layout.expect_compatible(&ck.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(ck.params)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
