//! DMTC checkpoints.
//!
//! ```text
//! 0..4    magic "DMTC"
//! 4       version
//! 5..9    manifest length n, u32 LE
//! 9..9+n  JSON manifest
//! ...     float32 LE payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TargetStats, TrainState};
use crate::config::RunConfig;
use crate::nn::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMTC";
pub const CHECKPOINT_VERSION: u8 = 1;
const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    /// How per-step streams are derived from the seed.
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
    pub config: RunConfig,
    pub step: u64,
    pub epoch: u64,
    pub optimizer_step: u64,
    pub rng: RngRecord,
    #[serde(default)]
    pub target_stats: Option<TargetStats>,
}

/// A decoded checkpoint: manifest plus tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.manifest.tensors.iter().position(|t| t.name == name).map(|i| self.tensors[i].as_slice())
    }

    /// Copies every model tensor whose name and size match into `ps`;
    /// returns how many were loaded.
    pub fn load_params(&self, ps: &mut ParamStore<f32>) -> usize {
        let mut n = 0;
        for e in ps.entries_mut() {
            if let Some(t) = self.tensor(&e.name) {
                if t.len() == e.data.len() {
                    e.data.copy_from_slice(t);
                    n += 1;
                }
            }
        }
        n
    }

    /// Restores parameters, optimizer moments and the step counter; every
    /// tensor of `state` must be present.
    pub fn restore(&self, state: &mut TrainState) -> Result<()> {
        let missing = |n: &str| Error::Corruption(format!("tensor {n} missing or mis-sized"));
        for (i, e) in state.params.entries_mut().iter_mut().enumerate() {
            let t = self.tensor(&e.name).filter(|t| t.len() == e.data.len()).ok_or_else(|| missing(&e.name))?;
            e.data.copy_from_slice(t);
            for (prefix, dst) in [(OPT_M, &mut state.opt.m[i]), (OPT_V, &mut state.opt.v[i])] {
                let name = format!("{prefix}{}", e.name);
                let t = self.tensor(&name).filter(|t| t.len() == dst.len()).ok_or_else(|| missing(&name))?;
                dst.copy_from_slice(t);
            }
        }
        state.opt.step = self.manifest.optimizer_step;
        state.step = self.manifest.step;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `state` atomically (temporary file, then rename).
pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState, config: &RunConfig, epoch: u64, stats: Option<&TargetStats>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[f32]| {
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: payload.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for e in state.params.entries() {
        push(e.name.clone(), &e.shape, &e.data);
    }
    for (i, e) in state.params.entries().iter().enumerate() {
        push(format!("{OPT_M}{}", e.name), &e.shape, &state.opt.m[i]);
        push(format!("{OPT_V}{}", e.name), &e.shape, &state.opt.v[i]);
    }
    let manifest = Manifest {
        dtype: "float32".into(),
        tensors,
        payload_sha256: sha256_hex(&payload),
        config: config.clone(),
        step: state.step,
        epoch,
        optimizer_step: state.opt.step,
        rng: RngRecord {
            seed: config.seed,
            scheme: "sha256(seed, label) -> chacha8; labels init, shuffle/{epoch}, views/{epoch}/{sample_id}".into(),
        },
        target_stats: stats.cloned(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(9 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("dmtc.tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 9 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not a DMTC checkpoint"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::format("version", format!("{}", bytes[4])));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = bytes.get(9..9 + n).ok_or_else(|| Error::Corruption("manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Corruption(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[9 + n..]))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

/// Reads and verifies a checkpoint; any payload change is a corruption error.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, payload) = split(&bytes)?;
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(Error::Corruption("payload hash does not match manifest".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let start = t.offset as usize;
        let end = start + 4 * t.len as usize;
        if t.shape.iter().product::<usize>() != t.len as usize {
            return Err(Error::Corruption(format!("tensor {} shape disagrees with length", t.name)));
        }
        let raw = payload.get(start..end).ok_or_else(|| Error::Corruption(format!("tensor {} outside payload", t.name)))?;
        tensors.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
    }
    Ok(Checkpoint { manifest, tensors })
}
