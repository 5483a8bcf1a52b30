use serde::{Deserialize, Serialize};

use super::ModelError;

/// How the output projection is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// All zeros: the untrained model predicts the uniform distribution.
    #[default]
    Zero,
    /// Truncated normal with std `d_model^-0.5`.
    Normal,
}

/// Architecture hyperparameters of the encoder-decoder.
///
/// The layout is the T5 v1.1 one: RMS norm without bias, a gated-GELU
/// feed-forward, untied input and output embeddings, a single relative
/// position bias table per stack (computed by the first block and shared by
/// the rest) and no position information in cross-attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub num_layers_enc: usize,
    pub num_layers_dec: usize,
    pub num_heads: usize,
    pub d_kv: usize,
    pub vocab_size: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub tie_embeddings: bool,
    pub dropout: f64,
    pub norm_eps: f64,
    pub head_init: HeadInit,
}

impl Default for ModelConfig {
    /// The `nano` preset.
    fn default() -> Self {
        ModelConfig::preset("nano").expect("nano is a known preset")
    }
}

pub const PRESETS: [&str; 3] = ["nano", "small", "base"];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        let cfg = match name {
            "base" => ModelConfig {
                d_model: 768,
                d_ff: 2048,
                num_layers_enc: 12,
                num_layers_dec: 12,
                num_heads: 12,
                d_kv: 64,
                vocab_size: 32128,
                num_buckets: 32,
                max_distance: 128,
                tie_embeddings: false,
                dropout: 0.0,
                norm_eps: 1e-6,
                head_init: HeadInit::Zero,
            },
            "small" => ModelConfig {
                d_model: 512,
                d_ff: 1024,
                num_layers_enc: 8,
                num_layers_dec: 8,
                num_heads: 6,
                d_kv: 64,
                vocab_size: 32128,
                num_buckets: 32,
                max_distance: 128,
                tie_embeddings: false,
                dropout: 0.0,
                norm_eps: 1e-6,
                head_init: HeadInit::Zero,
            },
            "nano" => ModelConfig {
                d_model: 64,
                d_ff: 128,
                num_layers_enc: 2,
                num_layers_dec: 2,
                num_heads: 4,
                d_kv: 16,
                vocab_size: 384,
                num_buckets: 32,
                max_distance: 128,
                tie_embeddings: false,
                dropout: 0.0,
                norm_eps: 1e-6,
                head_init: HeadInit::Zero,
            },
            other => {
                return Err(ModelError::UnknownPreset {
                    name: other.to_string(),
                    known: PRESETS.join(", "),
                })
            }
        };
        Ok(cfg)
    }

    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.d_kv
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.num_heads == 0 || self.d_kv == 0 || self.d_ff == 0 {
            return fail("d_model, d_ff, num_heads and d_kv must be positive".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.num_buckets == 0 || self.num_buckets % 2 != 0 {
            return fail(format!("num_buckets must be even, got {}", self.num_buckets));
        }
        if self.max_distance <= self.num_buckets / 4 {
            return fail(format!(
                "max_distance {} must exceed num_buckets / 4",
                self.max_distance
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.norm_eps < 0.0 {
            return fail("norm_eps must be nonnegative".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// * embeddings: `vocab * d_model`, plus the same again for an untied head
    /// * self-attention: `4 * d_model * inner` (q, k, v, o) and one norm of `d_model`
    /// * cross-attention (decoder only): same as self-attention
    /// * gated feed-forward: `3 * d_model * d_ff` (two input maps, one output) and one norm
    /// * relative bias: `num_buckets * num_heads` per non-empty stack
    /// * final norm: `d_model` per stack
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * d * self.inner_dim() + d;
        let ffn = 3 * d * self.d_ff + d;
        let bias = self.num_buckets * self.num_heads;
        let stack = |layers: usize, per_layer: usize| {
            layers * per_layer + if layers > 0 { bias } else { 0 } + d
        };
        let embeddings = self.vocab_size * d * if self.tie_embeddings { 1 } else { 2 };
        embeddings + stack(self.num_layers_enc, attn + ffn) + stack(self.num_layers_dec, 2 * attn + ffn)
    }
}
