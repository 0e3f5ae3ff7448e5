//! Single-file checkpoints: a JSON header with the network spec and the
//! parameter layout, followed by the raw little-endian `f64` values.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{NetworkSpec, ParamEntry, ParameterVector, SegmentationNetwork};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    entries: Vec<ParamEntry>,
}

pub fn encode_checkpoint(spec: &NetworkSpec, params: &ParameterVector) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header { spec: spec.clone(), entries: params.entries().to_vec() })?;
    let mut out = Vec::with_capacity(24 + header.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a checkpoint and rebuilds the network it was saved from. The
/// returned parameters share the rebuilt network's layout.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(SegmentationNetwork, ParameterVector)> {
    let bad = |m: &str| Error::Data(format!("invalid checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let network = SegmentationNetwork::new(header.spec)?;
    if **network.layout() != header.entries {
        return Err(bad("parameter layout does not match the network spec"));
    }
    let raw = &bytes[20 + hlen..];
    let expected = network.layout().last().map_or(0, |e| e.offset + e.len());
    if raw.len() != 8 * expected {
        return Err(bad("value section has the wrong length"));
    }
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let params = ParameterVector::from_values(Arc::clone(network.layout()), values)?;
    Ok((network, params))
}

pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, params: &ParameterVector) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_checkpoint(spec, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SegmentationNetwork, ParameterVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
