//! Checkpoint directories: `manifest.json` plus two binary blobs,
//! `params.bin` and `optimizer.bin`.
//!
//! Blob layout, all integers little-endian:
//!
//! ```text
//! magic "T5LB" | u32 version | u8 dtype (4 = f32, 8 = f64) | u64 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 ndim | u64 dims... | payload
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::VocabDescriptor;
use crate::model::{param_shapes, ModelConfig, ModelError, ModelParams};
use crate::optim::{AdafactorHyper, AdamHyper, Optimizer, OptimizerKind};
use crate::tensor::{DType, Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"T5LB";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: checkpoint format version {found}, this build reads version {supported}")]
    Version {
        path: String,
        found: u64,
        supported: u32,
    },
    #[error("{path}: truncated at byte {offset} while reading {what}")]
    Truncated {
        path: String,
        offset: usize,
        what: String,
    },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint stores {found:?} values, {requested:?} requested")]
    Dtype { found: DType, requested: DType },
    #[error("{path}: malformed checkpoint: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub kind: OptimizerKind,
    pub t: u64,
    pub adam: AdamHyper,
    pub adafactor: AdafactorHyper,
    pub buffers: Vec<TensorEntry>,
}

/// Everything needed to regenerate the data stream from where it stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub examples_consumed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub last_train_loss: Option<f64>,
    pub last_heldout_loss: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub phase: Phase,
    pub step: u64,
    pub dtype: DType,
    pub model: ModelConfig,
    pub vocab: VocabDescriptor,
    pub params: Vec<TensorEntry>,
    pub optimizer: OptimizerManifest,
    pub rng: RngState,
    pub metrics: MetricSummary,
    pub config: RunConfig,
}

/// Manifest fields supplied by the caller; tensor listings are filled in on save.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub step: u64,
    pub vocab: VocabDescriptor,
    pub rng: RngState,
    pub metrics: MetricSummary,
    pub config: RunConfig,
}

pub struct Checkpoint<T> {
    pub manifest: CheckpointManifest,
    pub params: ModelParams<T>,
    pub optimizer: Optimizer<T>,
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn dtype_code(d: DType) -> u8 {
    d.size() as u8
}

fn encode_blob<T: Element>(tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype_code(T::DTYPE));
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                path: self.path.display().to_string(),
                offset: self.bytes.len(),
                what: what.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode_blob<T: Element>(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(path, "bad magic number"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: path.display().to_string(),
            found: version as u64,
            supported: FORMAT_VERSION,
        });
    }
    let code = r.take(1, "dtype")?[0];
    if code != dtype_code(T::DTYPE) {
        let found = if code == 4 { DType::F32 } else { DType::F64 };
        return Err(CheckpointError::Dtype {
            found,
            requested: T::DTYPE,
        });
    }
    let count = r.u64("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let what = format!("tensor {i}");
        let len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| format_err(path, format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let payload = r.take(n.checked_mul(size).ok_or_else(|| format_err(path, "tensor too large"))?, &name)?;
        let data: Vec<T> = payload.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data).expect("length derived from shape");
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes a checkpoint into `dir` (created if needed) and returns its manifest.
pub fn save_checkpoint<T: Element>(
    dir: &Path,
    meta: &CheckpointMeta,
    params: &ModelParams<T>,
    optimizer: &Optimizer<T>,
) -> Result<CheckpointManifest, CheckpointError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let param_list: Vec<(&str, &Tensor<T>)> = params.iter().collect();
    let state = optimizer.state_tensors();
    let state_list: Vec<(&str, &Tensor<T>)> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let entries = |list: &[(&str, &Tensor<T>)]| -> Vec<TensorEntry> {
        list.iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect()
    };
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        phase: meta.phase,
        step: meta.step,
        dtype: T::DTYPE,
        model: meta.config.model.clone(),
        vocab: meta.vocab.clone(),
        params: entries(&param_list),
        optimizer: OptimizerManifest {
            kind: optimizer.kind,
            t: optimizer.t,
            adam: optimizer.adam,
            adafactor: optimizer.adafactor,
            buffers: entries(&state_list),
        },
        rng: meta.rng,
        metrics: meta.metrics.clone(),
        config: meta.config.clone(),
    };
    write_file(&dir.join(PARAMS_FILE), &encode_blob(&param_list))?;
    write_file(&dir.join(OPTIMIZER_FILE), &encode_blob(&state_list))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Reads and version-checks `manifest.json`.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| format_err(&path, "missing format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::Version {
            path: path.display().to_string(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| format_err(&path, e.to_string()))
}

fn read_blob<T: Element>(
    dir: &Path,
    file: &str,
    listed: &[TensorEntry],
) -> Result<BTreeMap<String, Tensor<T>>, CheckpointError> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    let tensors = decode_blob::<T>(&path, &bytes)?;
    if tensors.len() != listed.len() {
        return Err(format_err(
            &path,
            format!("{} tensors stored, manifest lists {}", tensors.len(), listed.len()),
        ));
    }
    let mut out = BTreeMap::new();
    for ((name, t), entry) in tensors.into_iter().zip(listed) {
        if name != entry.name {
            return Err(format_err(&path, format!("found {name}, manifest lists {}", entry.name)));
        }
        if t.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: entry.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
        out.insert(name, t);
    }
    Ok(out)
}

/// Loads a checkpoint, checking every tensor against the manifest and the
/// manifest's model config.
pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: manifest.dtype,
            requested: T::DTYPE,
        });
    }
    let schema: BTreeMap<String, Vec<usize>> = param_shapes(&manifest.model).into_iter().collect();
    for e in &manifest.params {
        if let Some(expected) = schema.get(&e.name) {
            if expected != &e.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: expected.clone(),
                    found: e.shape.clone(),
                });
            }
        }
    }
    let tensors = read_blob::<T>(dir, PARAMS_FILE, &manifest.params)?;
    let params = ModelParams::from_tensors(&manifest.model, tensors).map_err(|e| match e {
        ModelError::ParamShape {
            name,
            expected,
            found,
        } => CheckpointError::ShapeMismatch {
            name,
            expected,
            found,
        },
        other => format_err(dir, other.to_string()),
    })?;
    let o = &manifest.optimizer;
    let state = read_blob::<T>(dir, OPTIMIZER_FILE, &o.buffers)?;
    let mut optimizer = Optimizer::new(o.kind, o.adam, o.adafactor, &params)
        .map_err(|e| format_err(dir, e.to_string()))?;
    optimizer
        .load_state(o.t, &state)
        .map_err(|e| format_err(dir, e.to_string()))?;
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}

/// `checkpoints/step-000123` style directory name under a run directory.
pub fn checkpoint_dir(run_dir: &Path, step: u64, crash: bool) -> PathBuf {
    let prefix = if crash { "crash-step" } else { "step" };
    run_dir.join("checkpoints").join(format!("{prefix}-{step:06}"))
}
