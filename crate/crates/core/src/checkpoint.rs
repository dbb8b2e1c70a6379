//! Binary checkpoint format.
//!
//! Layout: magic `MRM1`, then little-endian `u32` fields
//! `prompt_dim, response_dim, hidden_layer_count, hidden widths..., activation`,
//! then every parameter as a little-endian `f64`. A JSON sidecar at
//! `<path>.json` records the seed and training provenance.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, ModelSpec, ParamVector};

pub const MAGIC: &[u8; 4] = b"MRM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &ParamVector) -> Vec<u8> {
    let layout = params.layout();
    let hidden = layout.hidden_dims();
    let mut buf = Vec::with_capacity(4 + 4 * (4 + hidden.len()) + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    let header = [layout.prompt_dim as u32, layout.response_dim as u32, hidden.len() as u32]
        .into_iter()
        .chain(hidden.iter().map(|&w| w as u32))
        .chain(std::iter::once(layout.activation.code()));
    for field in header {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint; `seed` is not stored in the binary and is set to 0.
pub fn decode(bytes: &[u8]) -> std::result::Result<(ModelSpec, ParamVector), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let prompt_dim = r.u32()? as usize;
    let response_dim = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if n_hidden > 1024 {
        return Err(format!("implausible hidden layer count {n_hidden}"));
    }
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let code = r.u32()?;
    let activation =
        Activation::from_code(code).ok_or_else(|| format!("unknown activation code {code}"))?;
    let spec = ModelSpec::new(prompt_dim, response_dim, hidden).with_activation(activation);
    let layout = spec.layout().map_err(|e| e.to_string())?;
    let rest = &bytes[r.pos..];
    if rest.len() != 8 * layout.len() {
        return Err(format!(
            "expected {} parameter bytes, found {}",
            8 * layout.len(),
            rest.len()
        ));
    }
    let values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::from_values(Arc::new(layout), values).map_err(|e| e.to_string())?;
    Ok((spec, params))
}

pub fn save(path: &Path, params: &ParamVector, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Loads the checkpoint and, if present, its sidecar (restoring the seed).
pub fn load(path: &Path) -> Result<(ModelSpec, ParamVector, Option<CheckpointMeta>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut spec, params) = decode(&bytes).map_err(|r| Error::parse(path, r))?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::parse(&side, e))?;
        spec.seed = meta.seed;
        Some(meta)
    } else {
        None
    };
    Ok((spec, params, meta))
}
