//! Checkpoint file: `"PDLN"`, `u32` version, `u32` length + JSON network
//! config, `u32` length + JSON manifest of `{name, shape}`, then every buffer
//! as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{NetworkConfig, NetworkParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDLN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(params: &NetworkParams, cfg: &NetworkConfig) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(cfg)?;
    let named = params.named_tensors();
    let manifest: Vec<ManifestEntry> = named
        .iter()
        .map(|(name, shape, _)| ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
        })
        .collect();
    let manifest = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for (_, _, data) in &named {
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(Error::format(
            *pos as u64,
            format!("truncated while reading {what}"),
        ));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(
        take(bytes, pos, 4, what)?.try_into().unwrap(),
    ))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkParams, NetworkConfig)> {
    let mut pos = 0usize;
    if take(bytes, &mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"PDLN\""));
    }
    let version = read_u32(bytes, &mut pos, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let len = read_u32(bytes, &mut pos, "config length")? as usize;
    let at = pos;
    let cfg: NetworkConfig = serde_json::from_slice(take(bytes, &mut pos, len, "config")?)
        .map_err(|e| Error::format(at as u64, format!("config: {e}")))?;
    cfg.validate()?;
    let len = read_u32(bytes, &mut pos, "manifest length")? as usize;
    let at = pos;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(take(bytes, &mut pos, len, "manifest")?)
            .map_err(|e| Error::format(at as u64, format!("manifest: {e}")))?;

    let mut params = NetworkParams::init(&cfg)?;
    let expected: Vec<ManifestEntry> = params
        .named_tensors()
        .into_iter()
        .map(|(name, shape, _)| ManifestEntry { name, shape })
        .collect();
    if manifest != expected {
        return Err(Error::format(
            at as u64,
            "manifest does not match the stored network config",
        ));
    }
    for buf in params.buffers_mut() {
        let raw = take(bytes, &mut pos, 4 * buf.len(), "parameter data")?;
        for (v, c) in buf.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    if pos != bytes.len() {
        return Err(Error::format(
            pos as u64,
            "trailing bytes after parameter data",
        ));
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(params: &NetworkParams, cfg: &NetworkConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, cfg)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, NetworkConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
