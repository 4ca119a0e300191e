//! Checkpoint files: one line of compact JSON manifest, a `\n`, then the
//! little-endian `f32` payload with tensors concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::corpus::Vocab;
use crate::error::{GemError, Result};
use crate::tensor::Real;

const FORMAT: &str = "gem-checkpoint/1";
const ADAM_M: &str = "optimizer.adam_m";
const ADAM_V: &str = "optimizer.adam_v";

/// Adam moments over the flat parameter vector followed by the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    pub vocab: Option<Vocab>,
    pub optimizer: Option<OptimizerSnapshot>,
    /// Free-form provenance (effective training config and the like).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    cap: usize,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    temperature: f32,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    optimizer_step: Option<usize>,
    vocab: Option<VocabEntry>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(state: ModelState<f32>) -> Self {
        Self {
            state,
            vocab: None,
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let state = &self.state;
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::with_capacity(state.params.len() * 4);
        let mut push = |name: &str, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: payload.len(),
                bytes: data.len() * 4,
            });
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for spec in state.layout().specs() {
            push(
                &spec.name,
                spec.shape.clone(),
                &state.params[spec.offset..spec.offset + spec.len],
            );
        }
        if let Some(opt) = &self.optimizer {
            let n = state.params.len() + 1;
            if opt.m.len() != n || opt.v.len() != n {
                return Err(GemError::Checkpoint("optimizer state has the wrong length".into()));
            }
            push(ADAM_M, vec![n], &opt.m);
            push(ADAM_V, vec![n], &opt.v);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            config: state.config().clone(),
            temperature: state.temperature,
            tensors,
            payload_bytes: payload.len(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            vocab: self.vocab.as_ref().map(|v| VocabEntry {
                cap: v.cap(),
                tokens: v.tokens().to_vec(),
            }),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GemError::Checkpoint("missing manifest terminator".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])
            .map_err(|e| GemError::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(GemError::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        let payload = &bytes[split + 1..];
        if payload.len() != manifest.payload_bytes {
            return Err(GemError::Checkpoint(format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let read = |e: &TensorEntry| -> Result<Vec<f32>> {
            let end = e.offset.checked_add(e.bytes).filter(|&end| end <= payload.len());
            let end = end.ok_or_else(|| {
                GemError::Checkpoint(format!("tensor {} overruns the payload", e.name))
            })?;
            if !e.bytes.is_multiple_of(4) || e.shape.iter().product::<usize>() * 4 != e.bytes {
                return Err(GemError::Checkpoint(format!("tensor {} has inconsistent size", e.name)));
            }
            Ok(payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let layout = super::ParamLayout::new(&manifest.config);
        let mut params = Vec::with_capacity(layout.total());
        for spec in layout.specs() {
            let entry = manifest
                .tensors
                .iter()
                .find(|t| t.name == spec.name)
                .ok_or_else(|| GemError::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if entry.shape != spec.shape {
                return Err(GemError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name, entry.shape, spec.shape
                )));
            }
            params.extend(read(entry)?);
        }
        let state = ModelState::from_parts(manifest.config, params, manifest.temperature)?;

        let optimizer = match manifest.optimizer_step {
            None => None,
            Some(step) => {
                let find = |name: &str| {
                    manifest
                        .tensors
                        .iter()
                        .find(|t| t.name == name)
                        .ok_or_else(|| GemError::Checkpoint(format!("missing tensor {name}")))
                };
                Some(OptimizerSnapshot {
                    step,
                    m: read(find(ADAM_M)?)?,
                    v: read(find(ADAM_V)?)?,
                })
            }
        };
        let vocab = manifest
            .vocab
            .map(|v| Vocab::from_tokens(v.cap, v.tokens))
            .transpose()?;
        Ok(Self {
            state,
            vocab,
            optimizer,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| GemError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| GemError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| GemError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Saves the model alone, rounded to `f32`.
pub fn save_checkpoint<T: Real>(state: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(state.cast::<f32>()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState<f32>> {
    Checkpoint::load(path).map(|c| c.state)
}
