//! Layered run configuration: defaults, then a JSON file, then dotted
//! `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{CorpusSource, CorruptionConfig, DataError, Split, StreamSpec, Vocab};
use crate::model::{ModelConfig, ModelError};
use crate::optim::{AdafactorHyper, AdamHyper, OptimError, OptimizerKind};
use crate::schedule::{ScheduleError, ScheduleSpec};
use crate::tensor::DType;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("unknown key {key:?}; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("override {0:?} is not of the form section.key=value")]
    Syntax(String),
    #[error("{key}: {msg}")]
    Type { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<DataError> for ConfigError {
    fn from(e: DataError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<OptimError> for ConfigError {
    fn from(e: OptimError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<ScheduleError> for ConfigError {
    fn from(e: ScheduleError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Corpus, vocabulary and span-corruption settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Text file or directory of `.txt` files; `null` uses the bundled sample.
    pub corpus: Option<PathBuf>,
    /// Word list, one token per line; `null` selects the byte-level
    /// vocabulary sized by `model.vocab_size`.
    pub vocab_file: Option<PathBuf>,
    pub noise_density: f64,
    pub mean_span_length: f64,
    pub input_length: usize,
    /// Every `heldout_every`-th document is held out for evaluation.
    pub heldout_every: usize,
    /// Queue capacity of the background producer, in batches; 0 reads inline.
    pub prefetch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            vocab_file: None,
            noise_density: 0.15,
            mean_span_length: 3.0,
            input_length: 512,
            heldout_every: 10,
            prefetch: 64,
        }
    }
}

/// Optimizer choice and hyperparameters of all three optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub rms_eps: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub clip_threshold: f64,
    pub decay_rate: f64,
    /// Global gradient-norm clip; `null` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamHyper::default();
        let f = AdafactorHyper::default();
        OptimConfig {
            kind: OptimizerKind::Adafactor,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            rms_eps: a.rms_eps,
            eps1: f.eps1,
            eps2: f.eps2,
            clip_threshold: f.clip_threshold,
            decay_rate: f.decay_rate,
            max_grad_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            rms_eps: self.rms_eps,
        }
    }

    pub fn adafactor(&self) -> AdafactorHyper {
        AdafactorHyper {
            eps1: self.eps1,
            eps2: self.eps2,
            clip_threshold: self.clip_threshold,
            decay_rate: self.decay_rate,
        }
    }
}

/// Step loop settings shared by pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub micro_batch_size: usize,
    pub grad_accum_steps: usize,
    /// Held-out evaluation every this many steps; 0 evaluates only at the end.
    pub eval_interval: u64,
    /// Held-out batches per evaluation.
    pub eval_batches: usize,
    /// Checkpoint every this many steps; 0 checkpoints only at the end.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1 << 16,
            micro_batch_size: 8,
            grad_accum_steps: 16,
            eval_interval: 1000,
            eval_batches: 4,
            checkpoint_interval: 5000,
            seed: 0,
            precision: DType::F64,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch_size * self.grad_accum_steps
    }
}

/// Supervised fine-tuning data and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// `input<TAB>target` pairs; `null` uses the built-in string-reversal task.
    pub train_tsv: Option<PathBuf>,
    /// Every `heldout_every`-th pair is held out; 0 holds out nothing.
    pub heldout_every: usize,
    pub input_length: usize,
    pub target_length: usize,
    /// Generation limit for RougeL evaluation.
    pub max_decode_len: usize,
    /// Pairs generated for the built-in task.
    pub toy_pairs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            train_tsv: None,
            heldout_every: 0,
            input_length: 16,
            target_length: 16,
            max_decode_len: 16,
            toy_pairs: 32,
        }
    }
}

/// Everything a run needs; serialised verbatim into each run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Applies one `section.key=value` override. The value is read as JSON
    /// when it parses as JSON and as a plain string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax(assignment.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(ConfigError::Syntax(assignment.to_string()));
        }
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self).expect("config serialises");
        let mut node = &mut root;
        for (depth, key) in keys.iter().enumerate() {
            let Value::Object(map) = node else {
                return Err(ConfigError::UnknownKey {
                    key: keys[..=depth].join("."),
                    valid: "(none: parent is not a section)".into(),
                });
            };
            if !map.contains_key(*key) {
                let prefix = keys[..depth].join(".");
                let valid: Vec<String> = map
                    .keys()
                    .map(|k| if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") })
                    .collect();
                return Err(ConfigError::UnknownKey {
                    key: keys[..=depth].join("."),
                    valid: valid.join(", "),
                });
            }
            node = map.get_mut(*key).expect("checked");
        }
        let expected = json_kind(node);
        *node = value;
        *self = serde_json::from_value(root).map_err(|e| ConfigError::Type {
            key: path.to_string(),
            msg: format!("{e} (current value is a {expected})"),
        })?;
        Ok(())
    }

    /// Checks every section and their cross-constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        let vocab = self.vocab()?;
        if vocab.size() != self.model.vocab_size {
            return Err(ConfigError::Invalid(format!(
                "vocabulary has {} ids but model.vocab_size is {}",
                vocab.size(),
                self.model.vocab_size
            )));
        }
        self.corruption(&vocab)?;
        match self.optim.kind {
            OptimizerKind::Adafactor => self.optim.adafactor().validate()?,
            _ => self.optim.adam().validate()?,
        }
        if let Some(n) = self.optim.max_grad_norm {
            if !(n > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "optim.max_grad_norm {n} must be positive (use null to disable)"
                )));
            }
        }
        self.schedule.validate()?;
        let t = &self.train;
        if t.micro_batch_size == 0 || t.grad_accum_steps == 0 {
            return Err(ConfigError::Invalid(
                "train.micro_batch_size and train.grad_accum_steps must be positive".into(),
            ));
        }
        let f = &self.finetune;
        if f.input_length == 0 || f.target_length == 0 {
            return Err(ConfigError::Invalid(
                "finetune lengths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab, DataError> {
        match &self.data.vocab_file {
            Some(p) => Vocab::load_words(p),
            None => Vocab::bytes(self.model.vocab_size),
        }
    }

    pub fn corruption(&self, vocab: &Vocab) -> Result<CorruptionConfig, DataError> {
        CorruptionConfig::new(
            self.data.noise_density,
            self.data.mean_span_length,
            self.data.input_length,
            vocab,
        )
    }

    pub fn corpus(&self) -> CorpusSource {
        match &self.data.corpus {
            Some(p) => CorpusSource::Path(p.clone()),
            None => CorpusSource::Bundled,
        }
    }

    /// Pre-training stream over the training split.
    pub fn train_stream(&self) -> Result<StreamSpec, DataError> {
        let vocab = self.vocab()?;
        Ok(StreamSpec {
            source: self.corpus(),
            corruption: self.corruption(&vocab)?,
            vocab,
            split: Split::Train {
                every: self.data.heldout_every,
            },
            batch_size: self.train.micro_batch_size,
            seed: self.train.seed,
            cycle: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json(), "x").unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"seed": 7}, "model": {"d_model": 32}}"#, "x").unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.d_ff, 128);
    }

    #[test]
    fn unknown_file_key_rejected() {
        assert!(RunConfig::from_json(r#"{"optim": {"beta3": 1}}"#, "x").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("optim.kind=adamw_rms").unwrap();
        c.apply_override("schedule.kind=cosine").unwrap();
        c.apply_override("schedule.final_lr=0.5").unwrap();
        c.apply_override("data.corpus=/tmp/x.txt").unwrap();
        assert_eq!(c.optim.kind, OptimizerKind::AdamwRms);
        assert_eq!(c.schedule.final_lr, Some(0.5));
        assert_eq!(c.data.corpus, Some(PathBuf::from("/tmp/x.txt")));
        c.apply_override("schedule.final_lr=null").unwrap();
        assert_eq!(c.schedule.final_lr, None);
    }

    #[test]
    fn override_errors() {
        let mut c = RunConfig::default();
        let e = c.apply_override("optim.beta1=hello").unwrap_err();
        assert!(matches!(e, ConfigError::Type { .. }), "{e}");
        let e = c.apply_override("optim.beta3=1").unwrap_err();
        assert!(e.to_string().contains("optim.beta1"), "{e}");
        assert!(matches!(c.apply_override("nokey"), Err(ConfigError::Syntax(_))));
        assert!(matches!(
            c.apply_override("optim.kind.x=1"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert_eq!(c, RunConfig::default());
    }
}
