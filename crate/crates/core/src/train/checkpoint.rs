//! Checkpoint file: an 8-byte little-endian manifest length, the JSON
//! manifest, then every tensor as little-endian f32 in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainConfig;
use crate::context::{HistoryWindow, Vocabulary};
use crate::corpus::Ontology;
use crate::model::{Group, ModelConfig, ModelError, ParamStore, StarModel};
use crate::tensor::Tensor;

const FORMAT: &str = "star-checkpoint";
const VERSION: u32 = 1;
const MAX_MANIFEST: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Compatibility(m) => Self::Compatibility(m),
            other => Self::Compatibility(other.to_string()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: Group,
    decay: bool,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    history: HistoryWindow,
    step: u64,
    metrics: BTreeMap<String, f64>,
    vocab: Vec<String>,
    ontology: IndexMap<String, Vec<String>>,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: StarModel<f32>,
    pub vocab: Vocabulary,
    pub ontology: Ontology,
    pub history: HistoryWindow,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (frozen, store) in [(false, self.model.params()), (true, self.model.frozen())] {
            for (name, p) in store.iter() {
                entries.push(TensorEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    group: p.group,
                    decay: p.decay,
                    frozen,
                });
                for v in p.value.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            model: self.model.config().clone(),
            train: self.train.clone(),
            history: self.history,
            step: self.step,
            metrics: self.metrics.clone(),
            vocab: self.vocab.tokens().to_vec(),
            ontology: self.ontology.export_map(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let parse = |m: String| CheckpointError::Parse(m);
        if bytes.len() < 8 {
            return Err(parse("file shorter than the length prefix".into()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if len > MAX_MANIFEST || 8 + len > bytes.len() as u64 {
            return Err(parse(format!("manifest length {len} exceeds file size")));
        }
        let body = &bytes[8..8 + len as usize];
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| parse(format!("manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(CheckpointError::Compatibility(format!(
                "format {} v{} is not {FORMAT} v{VERSION}",
                manifest.format, manifest.version
            )));
        }
        let mut payload = &bytes[8 + len as usize..];
        let mut params = ParamStore::new();
        let mut frozen = ParamStore::new();
        for e in manifest.tensors {
            let numel = e
                .shape
                .iter()
                .try_fold(1usize, |a, &s| a.checked_mul(s))
                .filter(|&n| n > 0)
                .ok_or_else(|| parse(format!("tensor {} has invalid shape {:?}", e.name, e.shape)))?;
            let nbytes = numel
                .checked_mul(4)
                .filter(|&n| n <= payload.len())
                .ok_or_else(|| parse(format!("payload truncated in tensor {}", e.name)))?;
            let data = payload[..nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payload = &payload[nbytes..];
            let t = Tensor::new(e.shape, data)
                .map_err(|err| parse(format!("tensor {}: {err}", e.name)))?;
            let store = if e.frozen { &mut frozen } else { &mut params };
            if store.get(&e.name).is_some() {
                return Err(parse(format!("duplicate tensor {}", e.name)));
            }
            store.insert(e.name, t, e.group, e.decay);
        }
        if !payload.is_empty() {
            return Err(parse(format!("{} trailing bytes after payload", payload.len())));
        }
        let vocab = Vocabulary::from_list(manifest.vocab).map_err(|e| parse(e.to_string()))?;
        let ontology =
            Ontology::from_export_map(manifest.ontology).map_err(|e| parse(e.to_string()))?;
        let model = StarModel::from_parts(manifest.model, params, frozen, &vocab, &ontology)?;
        Ok(Self {
            model,
            vocab,
            ontology,
            history: manifest.history,
            train: manifest.train,
            step: manifest.step,
            metrics: manifest.metrics,
        })
    }

    /// Errors unless the stored model configuration equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        if self.model.config() != expected {
            return Err(CheckpointError::Compatibility(format!(
                "checkpoint config {:?} differs from requested {:?}",
                self.model.config(),
                expected
            )));
        }
        Ok(())
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&ckpt.to_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
