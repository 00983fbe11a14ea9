//! Checkpoint container, all integers little-endian:
//!
//! ```text
//! magic     4 bytes   "EESN"
//! version   u32       1
//! config    u32 length + UTF-8 JSON of the network config
//! params    u32 count, then per parameter in declaration order:
//!             u16 name length + UTF-8 name
//!             u8 rank + u32 per dimension
//!             f32 values, row-major
//! bn stats  u32 count, then per layer: u32 channels, f32 means, f32 variances
//! ```
//!
//! Loading rebuilds the network from the stored config and requires every
//! parameter name and shape to match what that config declares.

use std::io::{Read, Write};
use std::path::Path;

use super::{Network, NetworkConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EESN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&net.config)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in net.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(net.bn.len() as u32).to_le_bytes());
    for s in &net.bn {
        out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
        for &v in s.mean.iter().chain(&s.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt("checkpoint ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Network> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4).map_err(|_| Error::Format("not a checkpoint".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = cur.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| Error::Corrupt(format!("checkpoint config: {e}")))?;
    let mut net = Network::build(config, 0)?;
    let count = cur.u32()? as usize;
    if count != net.params.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint has {count} parameters, config declares {}",
            net.params.len()
        )));
    }
    for p in net.params.iter_mut() {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = cur.u8()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.value.shape() {
            return Err(Error::Corrupt(format!(
                "parameter {name} {shape:?} does not match {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let data = cur.f32s(p.value.numel())?;
        p.value = Tensor::new(&shape, data)?;
    }
    let count = cur.u32()? as usize;
    if count != net.bn.len() {
        return Err(Error::Corrupt("batch-norm layer count mismatch".into()));
    }
    for s in net.bn.iter_mut() {
        let c = cur.u32()? as usize;
        if c != s.mean.len() {
            return Err(Error::Corrupt("batch-norm width mismatch".into()));
        }
        s.mean = cur.f32s(c)?;
        s.var = cur.f32s(c)?;
    }
    if cur.pos != buf.len() {
        return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
