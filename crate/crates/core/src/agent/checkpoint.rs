//! Self-describing binary checkpoint container:
//! magic, format version, JSON manifest length, JSON manifest, then every
//! tensor's values as little-endian f64 in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::heads::{HeadConfig, HeadKind, HeadSnapshot};
use crate::ndcore::Tensor;

pub const MAGIC: &[u8; 8] = b"UQDQNCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// 1-based position among the run's checkpoints.
    pub index: usize,
    /// Environment steps completed when the checkpoint was taken.
    pub step: usize,
    pub snapshot: HeadSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub head_kind: HeadKind,
    pub head_config: HeadConfig,
    pub config_hash: String,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub index: usize,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn manifest(&self, config_hash: &str) -> CheckpointManifest {
        CheckpointManifest {
            head_kind: self.snapshot.config.kind(),
            head_config: self.snapshot.config.clone(),
            config_hash: config_hash.to_string(),
            obs_dim: self.snapshot.obs_dim,
            num_actions: self.snapshot.num_actions,
            index: self.index,
            step: self.step,
            tensors: self
                .snapshot
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self, config_hash: &str) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest(config_hash)).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.snapshot.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointManifest), AgentError> {
        let bad = |m: &str| AgentError::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
        let mut pos = 20 + mlen;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(&err.to_string()))?;
            tensors.push((e.name.clone(), t));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let ckpt = Checkpoint {
            index: manifest.index,
            step: manifest.step,
            snapshot: HeadSnapshot {
                config: manifest.head_config.clone(),
                obs_dim: manifest.obs_dim,
                num_actions: manifest.num_actions,
                tensors,
            },
        };
        Ok((ckpt, manifest))
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), AgentError> {
        write_atomic(path, &self.to_bytes(config_hash))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest), AgentError> {
        let bytes = std::fs::read(path).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), AgentError> {
    let io = |e: std::io::Error| AgentError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}
