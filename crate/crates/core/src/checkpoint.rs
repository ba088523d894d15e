//! Flat binary checkpoints: `PSTCK1`, a little-endian `u64` manifest length,
//! a JSON manifest, then every tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetConfig, Network};

pub const MAGIC: &[u8; 6] = b"PSTCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
    /// Running statistics rather than trainable parameters.
    #[serde(default)]
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: NetConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub metric: Option<f64>,
}

pub fn encode(net: &Network, epoch: Option<usize>, metric: Option<f64>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let params = net.param_names().into_iter().zip(net.params()).map(|(n, p)| (n, p, false));
    let buffers = net.buffers().into_iter().map(|(n, b)| (n, b, true));
    for (name, view, buffer) in params.chain(buffers) {
        tensors.push(TensorEntry { name, shape: view.shape().to_vec(), offset: payload.len(), buffer });
        payload.extend(view.iter());
    }
    let manifest = Manifest { config: net.config().clone(), tensors, epoch, metric };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Network, Manifest)> {
    let head = MAGIC.len() + 8;
    if bytes.len() < head || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::parse("not a PSTCK1 checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[MAGIC.len()..head].try_into().expect("8 bytes"));
    let json_end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(head))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::parse("checkpoint manifest truncated"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[head..json_end])
        .map_err(|e| Error::parse(format!("checkpoint manifest: {e}")))?;
    let body = &bytes[json_end..];
    if body.len() % 8 != 0 {
        return Err(Error::parse("checkpoint payload is not a whole number of f64 values"));
    }
    let payload: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let mut net = Network::new(manifest.config.clone(), 0).map_err(|e| Error::parse(format!("checkpoint config: {e}")))?;
    let names = net.param_names();
    let buffer_names: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
    let expected: Vec<(&String, bool)> =
        names.iter().map(|n| (n, false)).chain(buffer_names.iter().map(|n| (n, true))).collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::parse(format!(
            "checkpoint has {} tensors, network needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut total = 0;
    for (entry, (name, buffer)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != *name || entry.buffer != *buffer {
            return Err(Error::parse(format!("checkpoint tensor {} where {name} expected", entry.name)));
        }
        total += entry.shape.iter().product::<usize>();
    }
    if total != payload.len() {
        return Err(Error::parse(format!("payload holds {} values, manifest {total}", payload.len())));
    }
    let (param_entries, buffer_entries) = manifest.tensors.split_at(names.len());
    let fill = |dst: Vec<ndarray::ArrayViewMutD<'_, f64>>, entries: &[TensorEntry]| -> Result<()> {
        for (mut d, e) in dst.into_iter().zip(entries) {
            if d.shape() != e.shape.as_slice() {
                return Err(Error::parse(format!("tensor {} has shape {:?}, expected {:?}", e.name, e.shape, d.shape())));
            }
            let src = payload
                .get(e.offset..e.offset + d.len())
                .ok_or_else(|| Error::parse(format!("tensor {} exceeds the payload", e.name)))?;
            d.iter_mut().zip(src).for_each(|(a, &b)| *a = b);
        }
        Ok(())
    };
    fill(net.params_mut(), param_entries)?;
    fill(net.buffers_mut(), buffer_entries)?;
    Ok((net, manifest))
}

pub fn save(path: &Path, net: &Network, epoch: Option<usize>, metric: Option<f64>) -> Result<()> {
    fs::write(path, encode(net, epoch, metric)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, Manifest)> {
    decode(&fs::read(path)?)
}
