//! Checkpoint container.
//!
//! ```text
//! "XSECTCK1"                        8-byte magic
//! u32 LE n, n bytes                 JSON header {"config": .., "meta": ..}
//! u32 LE tensor count
//! per tensor: u16 LE name length, UTF-8 name, u64 LE element count,
//!             elements as little-endian binary32
//! 32 bytes                          SHA-256 of everything above
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::NetworkConfig;
use super::params::NetworkParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XSECTCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode(params: &NetworkParams<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        meta: meta.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let tensors: Vec<(String, &[f32])> = params
        .tensors()
        .into_iter()
        .chain(params.buffers())
        .collect();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(NetworkParams<f32>, serde_json::Value)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format(
            body.len() as u64,
            "checkpoint checksum mismatch",
        ));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let hlen = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen)?)
        .map_err(|e| Error::format(12, format!("bad checkpoint header: {e}")))?;
    let mut params = NetworkParams::<f32>::zeros(&header.config)?;
    let count = c.u32()? as usize;
    let mut named = std::collections::HashMap::new();
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?
            .to_string();
        let len = c.u64()? as usize;
        let raw = c.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::format(c.pos as u64, "tensor too large"))?,
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        named.insert(name, data);
    }
    if c.pos != body.len() {
        return Err(Error::format(
            c.pos as u64,
            "trailing bytes before checksum",
        ));
    }
    let train_names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let buffer_names: Vec<String> = params.buffers().into_iter().map(|(n, _)| n).collect();
    let slots = params.tensors_mut().into_iter().zip(&train_names);
    for (slot, name) in slots {
        fill(slot, name, &mut named)?;
    }
    for (slot, name) in params.buffers_mut().into_iter().zip(&buffer_names) {
        fill(slot, name, &mut named)?;
    }
    if let Some(extra) = named.keys().next() {
        return Err(Error::format(0, format!("unexpected tensor {extra}")));
    }
    if !params.is_finite() {
        return Err(Error::format(0, "checkpoint contains non-finite values"));
    }
    Ok((params, header.meta))
}

fn fill(
    slot: &mut Vec<f32>,
    name: &str,
    named: &mut std::collections::HashMap<String, Vec<f32>>,
) -> Result<()> {
    let data = named
        .remove(name)
        .ok_or_else(|| Error::format(0, format!("checkpoint lacks tensor {name}")))?;
    if slot.len() != data.len() {
        return Err(Error::format(
            0,
            format!(
                "tensor {name} has {} values, expected {}",
                data.len(),
                slot.len()
            ),
        ));
    }
    *slot = data;
    Ok(())
}

pub fn save(
    params: &NetworkParams<f32>,
    meta: &serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(NetworkParams<f32>, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
