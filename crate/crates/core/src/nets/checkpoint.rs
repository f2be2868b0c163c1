//! Weight container and JSON sidecar.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! b"PECADWT1"
//! u32 n_params, u32 n_buffers
//! repeated n_params + n_buffers times:
//!     u32 name_len, name (utf-8), u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! ```
//!
//! The sidecar `<file>.json` records architecture, config hash, seed, epoch,
//! validation metrics and the SHA-256 of the weight file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::Network;
use crate::digest::sha256_hex;
use crate::error::{PecadError, Result};

const MAGIC: &[u8; 8] = b"PECADWT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub scale: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub training_seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub rng_digest: String,
    pub weights_digest: String,
}

/// Trained weights plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ParamStore,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(
        net: &dyn Network,
        training_seed: u64,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
        rng_digest: String,
    ) -> Self {
        let config = net.config_json();
        let scale = config
            .get("scale")
            .and_then(|s| s.as_str())
            .unwrap_or("UNKNOWN")
            .to_string();
        let weights = net.store().clone();
        let weights_digest = sha256_hex(&encode_weights(&weights));
        Self {
            meta: CheckpointMeta {
                arch: net.kind().to_string(),
                scale,
                config_hash: net.config_hash(),
                config,
                training_seed,
                epoch,
                metrics,
                rng_digest,
                weights_digest,
            },
            weights,
        }
    }

    /// SHA-256 of the encoded weights.
    pub fn digest(&self) -> &str {
        &self.meta.weights_digest
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_weights(&self.weights);
        fs::write(path, &bytes).map_err(|e| PecadError::io(path, e))?;
        let sidecar = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| PecadError::format("checkpoint sidecar", e.to_string()))?;
        fs::write(&sidecar, json + "\n").map_err(|e| PecadError::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PecadError::io(path, e))?;
        let sidecar = Self::sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| PecadError::io(&sidecar, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| PecadError::format("checkpoint sidecar", e.to_string()))?;
        let digest = sha256_hex(&bytes);
        if digest != meta.weights_digest {
            return Err(PecadError::format(
                "checkpoint",
                format!("weight digest {digest} does not match sidecar {}", meta.weights_digest),
            ));
        }
        Ok(Self {
            weights: decode_weights(&bytes)?,
            meta,
        })
    }

    /// Copy the weights into `net` after checking its config hash and layout.
    pub fn restore_into(&self, net: &mut dyn Network) -> Result<()> {
        let expected = net.config_hash();
        if expected != self.meta.config_hash {
            return Err(PecadError::HashMismatch {
                expected,
                found: self.meta.config_hash.clone(),
            });
        }
        if !net.store_mut().load_values(&self.weights) {
            return Err(PecadError::format(
                "checkpoint",
                "parameter layout does not match the architecture",
            ));
        }
        Ok(())
    }
}

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.params().len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.buffers().len() as u32).to_le_bytes());
    let entries = store
        .param_names()
        .iter()
        .zip(store.params())
        .chain(store.buffer_names().iter().zip(store.buffers()));
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PecadError::format("weight file", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| PecadError::format("weight file", "tensor name is not utf-8"))?;
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| PecadError::format("weight file", "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PecadError::format("weight file", "bad magic"));
    }
    let n_params = r.u32()? as usize;
    let n_buffers = r.u32()? as usize;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for _ in 0..n_params {
        let (n, t) = r.tensor()?;
        names.push(n);
        params.push(t);
    }
    let mut bnames = Vec::new();
    let mut buffers = Vec::new();
    for _ in 0..n_buffers {
        let (n, t) = r.tensor()?;
        bnames.push(n);
        buffers.push(t);
    }
    if r.pos != bytes.len() {
        return Err(PecadError::format("weight file", "trailing bytes"));
    }
    Ok(ParamStore::from_parts(names, params, bnames, buffers))
}
