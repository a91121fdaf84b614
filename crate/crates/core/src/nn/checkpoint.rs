//! `ISNN1` checkpoints.
//!
//! Layout (little-endian): `b"ISNN"`, version byte `0x01`, u32 length + UTF-8
//! network spec text, u32 tensor count, then per tensor: u32 length + name,
//! u8 rank, `rank` u32 dims and the `f32` payload.

use std::fs;
use std::path::Path;

use super::network::{Network, NetworkSpec, NetworkState};
use crate::error::{Error, Result};

pub const ISNN_MAGIC: &[u8; 4] = b"ISNN";
const VERSION: u8 = 0x01;

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ISNN_MAGIC);
    out.push(VERSION);
    let spec = net.spec.to_text();
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    let params = net.state.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::Format(format!("checkpoint truncated at offset {pos}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let magic = take(4).map_err(|_| Error::BadMagic {
        expected: "ISNN".into(),
        found: String::from_utf8_lossy(bytes).into_owned(),
    })?;
    if magic != ISNN_MAGIC {
        return Err(Error::BadMagic {
            expected: "ISNN".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = take(1)?[0];
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let spec_len = u32_at(take(4)?);
    let spec_text = std::str::from_utf8(take(spec_len)?)
        .map_err(|_| Error::Format("network spec is not UTF-8".into()))?;
    let spec = NetworkSpec::parse(spec_text)?;
    let count = u32_at(take(4)?);
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u32_at(take(4)?);
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        let n: usize = shape.iter().product();
        let payload = take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        named.push((name, shape, data));
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - pos)));
    }
    let state = NetworkState::from_named(&spec, named)?;
    Ok(Network { spec, state })
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode_checkpoint(&fs::read(path)?)
}
