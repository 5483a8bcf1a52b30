use rand_chacha::ChaCha8Rng;

use super::bucket::bucket_grid;
use super::{ModelConfig, ModelError, ModelParams, ParamVars};
use crate::data::Batch;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Value written over masked attention scores before the softmax.
///
/// Large enough that `exp` underflows to exactly zero, which keeps masked
/// positions from influencing anything bit-for-bit.
const MASKED_SCORE: f64 = -1e9;

/// Which positions of a `[batch, q_len, k_len]` score block may attend.
struct AttentionMask {
    /// Row-major `[batch, heads, q_len, k_len]`, true where masked.
    masked: Vec<bool>,
}

impl AttentionMask {
    fn new(
        batch: usize,
        heads: usize,
        q_len: usize,
        k_len: usize,
        key_valid: &[bool],
        causal: bool,
    ) -> Self {
        let mut masked = Vec::with_capacity(batch * heads * q_len * k_len);
        for b in 0..batch {
            let keys = &key_valid[b * k_len..(b + 1) * k_len];
            for _ in 0..heads {
                for q in 0..q_len {
                    masked.extend(
                        keys.iter()
                            .enumerate()
                            .map(|(k, &valid)| !valid || (causal && k > q)),
                    );
                }
            }
        }
        AttentionMask { masked }
    }
}

/// Builds the encoder-decoder graph on a tape.
pub struct Forward<'a, T> {
    pub tape: &'a mut Tape<T>,
    vars: &'a ParamVars,
    cfg: &'a ModelConfig,
    dropout: Option<ChaCha8Rng>,
}

impl<'a, T: Element> Forward<'a, T> {
    /// Evaluation mode: dropout disabled.
    pub fn new(tape: &'a mut Tape<T>, vars: &'a ParamVars, cfg: &'a ModelConfig) -> Self {
        Forward {
            tape,
            vars,
            cfg,
            dropout: None,
        }
    }

    /// Training mode with a seeded dropout stream.
    pub fn training(
        tape: &'a mut Tape<T>,
        vars: &'a ParamVars,
        cfg: &'a ModelConfig,
        rng: ChaCha8Rng,
    ) -> Self {
        Forward {
            tape,
            vars,
            cfg,
            dropout: Some(rng),
        }
    }

    fn p(&self, name: &str) -> Var {
        self.vars.get(name)
    }

    fn drop(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            Some(rng) => self.tape.dropout(x, self.cfg.dropout, rng),
            None => x,
        }
    }

    fn embed(&mut self, ids: &[u32], batch: usize, len: usize) -> Result<Var, ModelError> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = self.tape.embedding(self.p("shared"), &idx)?;
        Ok(self.tape.reshape(e, &[batch, len, self.cfg.d_model])?)
    }

    /// `[heads, q_len, k_len]` bias from the stack's bucket table.
    fn position_bias(
        &mut self,
        stack: &str,
        q_len: usize,
        k_len: usize,
        bidirectional: bool,
    ) -> Result<Var, ModelError> {
        let cfg = self.cfg;
        let ids = bucket_grid(
            q_len,
            k_len,
            bidirectional,
            cfg.num_buckets,
            cfg.max_distance,
        );
        let table = self.p(&format!("{stack}.rel_bias"));
        let b = self.tape.embedding(table, &ids)?;
        let b = self.tape.reshape(b, &[q_len, k_len, cfg.num_heads])?;
        let b = self.tape.transpose(b, 1, 2)?;
        Ok(self.tape.transpose(b, 0, 1)?)
    }

    /// `[batch, len, inner]` to `[batch * heads, len, d_kv]`.
    fn split_heads(&mut self, x: Var, batch: usize, len: usize) -> Result<Var, ModelError> {
        let (h, dk) = (self.cfg.num_heads, self.cfg.d_kv);
        let x = self.tape.reshape(x, &[batch, len, h, dk])?;
        let x = self.tape.transpose(x, 1, 2)?;
        Ok(self.tape.reshape(x, &[batch * h, len, dk])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        query_in: Var,
        kv_in: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        bias: Option<Var>,
        mask: &AttentionMask,
    ) -> Result<Var, ModelError> {
        let (h, inner) = (self.cfg.num_heads, self.cfg.inner_dim());
        let q = self.tape.matmul(query_in, self.p(&format!("{prefix}.q")))?;
        let k = self.tape.matmul(kv_in, self.p(&format!("{prefix}.k")))?;
        let v = self.tape.matmul(kv_in, self.p(&format!("{prefix}.v")))?;
        let q = self.split_heads(q, batch, q_len)?;
        let k = self.split_heads(k, batch, k_len)?;
        let v = self.split_heads(v, batch, k_len)?;
        let kt = self.tape.transpose(k, 1, 2)?;
        // no 1/sqrt(d_kv) temperature: it is folded into the query init
        let scores = self.tape.matmul(q, kt)?;
        let mut scores = self.tape.reshape(scores, &[batch, h, q_len, k_len])?;
        if let Some(b) = bias {
            scores = self.tape.add(scores, b)?;
        }
        let scores = self
            .tape
            .masked_fill(scores, &mask.masked, T::cast(MASKED_SCORE))?;
        let weights = self.tape.softmax(scores)?;
        let weights = self.drop(weights);
        let weights = self.tape.reshape(weights, &[batch * h, q_len, k_len])?;
        let ctx = self.tape.matmul(weights, v)?;
        let ctx = self.tape.reshape(ctx, &[batch, h, q_len, self.cfg.d_kv])?;
        let ctx = self.tape.transpose(ctx, 1, 2)?;
        let ctx = self.tape.reshape(ctx, &[batch, q_len, inner])?;
        Ok(self.tape.matmul(ctx, self.p(&format!("{prefix}.o")))?)
    }

    /// Gated-GELU feed-forward.
    fn feed_forward(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let gate = self.tape.matmul(x, self.p(&format!("{prefix}.wi0")))?;
        let gate = self.tape.gelu(gate);
        let lin = self.tape.matmul(x, self.p(&format!("{prefix}.wi1")))?;
        let h = self.tape.mul(gate, lin)?;
        let h = self.drop(h);
        Ok(self.tape.matmul(h, self.p(&format!("{prefix}.wo")))?)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let eps = T::cast(self.cfg.norm_eps);
        Ok(self.tape.rms_norm(x, self.p(name), eps)?)
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var, ModelError> {
        let update = self.drop(update);
        Ok(self.tape.add(x, update)?)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            Some(&bad) => Err(ModelError::TokenOutOfRange {
                id: bad,
                vocab: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Encoder stack over `[batch, len]` ids; returns `[batch, len, d_model]`.
    pub fn encode(
        &mut self,
        input_ids: &[u32],
        input_mask: &[bool],
        batch: usize,
        len: usize,
    ) -> Result<Var, ModelError> {
        if input_ids.len() != batch * len || input_mask.len() != batch * len {
            return Err(ModelError::Shape(format!(
                "encoder input of {} ids / {} mask entries for batch {batch} x {len}",
                input_ids.len(),
                input_mask.len()
            )));
        }
        self.check_ids(input_ids)?;
        let cfg = self.cfg;
        let x = self.embed(input_ids, batch, len)?;
        let mut x = self.drop(x);
        let mask = AttentionMask::new(batch, cfg.num_heads, len, len, input_mask, false);
        let bias = if cfg.num_layers_enc > 0 {
            Some(self.position_bias("encoder", len, len, true)?)
        } else {
            None
        };
        for i in 0..cfg.num_layers_enc {
            let block = format!("encoder.block{i}");
            let h = self.norm(x, &format!("{block}.attn_norm"))?;
            let a = self.attention(&format!("{block}.attn"), h, h, batch, len, len, bias, &mask)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("{block}.ffn_norm"))?;
            let f = self.feed_forward(&format!("{block}.ffn"), h)?;
            x = self.residual(x, f)?;
        }
        let x = self.norm(x, "encoder.final_norm")?;
        Ok(self.drop(x))
    }

    /// Decoder stack; returns logits `[batch, target_len, vocab]`.
    ///
    /// Self-attention is causal, so position `t` only sees targets `<= t`.
    pub fn decode(
        &mut self,
        decoder_ids: &[u32],
        batch: usize,
        target_len: usize,
        encoder_states: Var,
        encoder_mask: &[bool],
    ) -> Result<Var, ModelError> {
        let cfg = self.cfg;
        let enc_shape = self.tape.shape(encoder_states).to_vec();
        if enc_shape.len() != 3
            || enc_shape[0] != batch
            || enc_shape[2] != cfg.d_model
            || encoder_mask.len() != batch * enc_shape[1]
            || decoder_ids.len() != batch * target_len
        {
            return Err(ModelError::Shape(format!(
                "decoder batch {batch} x {target_len} incompatible with encoder states {enc_shape:?}"
            )));
        }
        self.check_ids(decoder_ids)?;
        let src_len = enc_shape[1];
        let x = self.embed(decoder_ids, batch, target_len)?;
        let mut x = self.drop(x);
        let all_valid = vec![true; batch * target_len];
        let self_mask =
            AttentionMask::new(batch, cfg.num_heads, target_len, target_len, &all_valid, true);
        let cross_mask =
            AttentionMask::new(batch, cfg.num_heads, target_len, src_len, encoder_mask, false);
        let bias = if cfg.num_layers_dec > 0 {
            Some(self.position_bias("decoder", target_len, target_len, false)?)
        } else {
            None
        };
        for i in 0..cfg.num_layers_dec {
            let block = format!("decoder.block{i}");
            let h = self.norm(x, &format!("{block}.attn_norm"))?;
            let a = self.attention(
                &format!("{block}.attn"),
                h,
                h,
                batch,
                target_len,
                target_len,
                bias,
                &self_mask,
            )?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("{block}.cross_norm"))?;
            let c = self.attention(
                &format!("{block}.cross"),
                h,
                encoder_states,
                batch,
                target_len,
                src_len,
                None,
                &cross_mask,
            )?;
            x = self.residual(x, c)?;
            let h = self.norm(x, &format!("{block}.ffn_norm"))?;
            let f = self.feed_forward(&format!("{block}.ffn"), h)?;
            x = self.residual(x, f)?;
        }
        let x = self.norm(x, "decoder.final_norm")?;
        let x = self.drop(x);
        let logits = if cfg.tie_embeddings {
            let scaled = self.tape.scale(x, T::cast((cfg.d_model as f64).powf(-0.5)));
            let head = self.tape.transpose(self.p("shared"), 0, 1)?;
            self.tape.matmul(scaled, head)?
        } else {
            self.tape.matmul(x, self.p("lm_head"))?
        };
        Ok(logits)
    }

    /// Mean NLL of the batch labels.
    pub fn loss(&mut self, batch: &Batch) -> Result<Var, ModelError> {
        let enc = self.encode(
            &batch.input_ids,
            &batch.input_mask,
            batch.size,
            batch.input_len,
        )?;
        let logits = self.decode(
            &batch.decoder_input_ids,
            batch.size,
            batch.target_len,
            enc,
            &batch.input_mask,
        )?;
        let flat = self.tape.reshape(
            logits,
            &[batch.size * batch.target_len, self.cfg.vocab_size],
        )?;
        Ok(self
            .tape
            .cross_entropy(flat, &batch.labels, crate::data::IGNORE_INDEX)?)
    }
}

/// A recorded loss graph, ready for backward.
pub struct LossGraph<T> {
    pub tape: Tape<T>,
    pub vars: ParamVars,
    pub loss: Var,
}

impl<T: Element> LossGraph<T> {
    pub fn value(&self) -> T {
        self.tape.item(self.loss)
    }

    /// Backpropagates `weight * loss` and adds the result into `params`' gradients.
    pub fn backward_into(
        mut self,
        params: &mut ModelParams<T>,
        weight: T,
    ) -> Result<T, ModelError> {
        let value = self.value();
        let scaled = self.tape.scale(self.loss, weight);
        self.tape.backward(scaled)?;
        params.accumulate_grads(&self.tape, &self.vars);
        Ok(value)
    }
}

/// Records the batch NLL; `dropout_rng` enables training-mode dropout.
pub fn forward_loss<T: Element>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<LossGraph<T>, ModelError> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = {
        let mut fwd = match dropout_rng {
            Some(rng) if cfg.dropout > 0.0 => Forward::training(&mut tape, &vars, cfg, rng),
            _ => Forward::new(&mut tape, &vars, cfg),
        };
        fwd.loss(batch)?
    };
    Ok(LossGraph { tape, vars, loss })
}

/// Encoder output for a single sequence, detached from any tape.
pub fn encode_detached<T: Element>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input_ids: &[u32],
    input_mask: &[bool],
    batch: usize,
) -> Result<Tensor<T>, ModelError> {
    let len = if batch == 0 { 0 } else { input_ids.len() / batch };
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = Forward::new(&mut tape, &vars, cfg).encode(input_ids, input_mask, batch, len)?;
    Ok(tape.tensor(out))
}

/// Decoder logits given precomputed encoder states.
pub fn decode_logits<T: Element>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    decoder_ids: &[u32],
    batch: usize,
    encoder_states: &Tensor<T>,
    encoder_mask: &[bool],
) -> Result<Tensor<T>, ModelError> {
    let target_len = if batch == 0 { 0 } else { decoder_ids.len() / batch };
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let enc = tape.constant(
        encoder_states.shape().to_vec(),
        encoder_states.data().to_vec(),
    )?;
    let out = Forward::new(&mut tape, &vars, cfg).decode(
        decoder_ids,
        batch,
        target_len,
        enc,
        encoder_mask,
    )?;
    Ok(tape.tensor(out))
}
