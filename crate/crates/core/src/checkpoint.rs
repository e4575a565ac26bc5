//! Versioned checkpoint file.
//!
//! Layout: the magic bytes `MTILCKPT1`, a little-endian `u64` length, that
//! many bytes of UTF-8 JSON metadata (format version, model config and its
//! hash, the ordered parameter manifest, training metadata), then every
//! parameter as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::TaskKind;
use crate::error::{Error, Result};
use crate::losses::TaskSet;
use crate::model::{Model, ModelConfig};
use crate::nn::{Mat, ParamStore};

pub const MAGIC: &[u8; 9] = b"MTILCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Per-dimension normalization of the skill target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub task: TaskKind,
    pub tasks: TaskSet,
    pub seed: u64,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub last_epoch: usize,
    pub best_val_f1: f64,
    pub labeled_hash: String,
    pub unlabeled_hash: Option<String>,
    pub class_weights: Vec<f64>,
    pub skill_stats: SkillStats,
    pub action_set: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    config_hash: String,
    manifest: Vec<ManifestEntry>,
    meta: TrainMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: TrainMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Pairs parameters with their config, checking the manifest.
    pub fn new(model: ModelConfig, meta: TrainMeta, params: ParamStore<f32>) -> Result<Self> {
        Model::new(model.clone())?.check_params(&params)?;
        Ok(Checkpoint { model, meta, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.clone(),
            config_hash: self.model.hash(),
            manifest: self
                .params
                .names()
                .iter()
                .zip(self.params.values())
                .map(|(n, v)| ManifestEntry { name: n.clone(), shape: v.shape() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * self.params.n_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values() {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::data("not a checkpoint file (bad magic)"))?;
        if rest.len() < 8 {
            return Err(Error::data("checkpoint truncated in header length"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(Error::data("checkpoint truncated in metadata"));
        }
        let header: Header = serde_json::from_slice(&rest[..len])
            .map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::data("checkpoint config hash does not match its config"));
        }
        let mut data = &rest[len..];
        let mut names = Vec::with_capacity(header.manifest.len());
        let mut values = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            let n = e.shape[0] * e.shape[1];
            if data.len() < 4 * n {
                return Err(Error::data(format!("checkpoint truncated in tensor {}", e.name)));
            }
            let v = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[4 * n..];
            names.push(e.name.clone());
            values.push(Mat::from_vec(e.shape[0], e.shape[1], v)?);
        }
        if !data.is_empty() {
            return Err(Error::data(format!("{} trailing bytes after the last tensor", data.len())));
        }
        let params = ParamStore::from_parts(names, values)?;
        Checkpoint::new(header.config, header.meta, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
