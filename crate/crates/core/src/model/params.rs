use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{HeadInit, ModelConfig, ModelError};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Named parameter tensors of the encoder-decoder, keyed by dotted path.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Initialisation rule for one parameter.
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn attention_schema(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model as f64;
    let inner = cfg.inner_dim();
    out.push((format!("{prefix}.q"), vec![cfg.d_model, inner], Init::Normal((d * cfg.d_kv as f64).powf(-0.5))));
    out.push((format!("{prefix}.k"), vec![cfg.d_model, inner], Init::Normal(d.powf(-0.5))));
    out.push((format!("{prefix}.v"), vec![cfg.d_model, inner], Init::Normal(d.powf(-0.5))));
    out.push((format!("{prefix}.o"), vec![inner, cfg.d_model], Init::Normal((inner as f64).powf(-0.5))));
}

fn ffn_schema(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model as f64;
    out.push((format!("{prefix}.wi0"), vec![cfg.d_model, cfg.d_ff], Init::Normal(d.powf(-0.5))));
    out.push((format!("{prefix}.wi1"), vec![cfg.d_model, cfg.d_ff], Init::Normal(d.powf(-0.5))));
    out.push((format!("{prefix}.wo"), vec![cfg.d_ff, cfg.d_model], Init::Normal((cfg.d_ff as f64).powf(-0.5))));
}

/// Every parameter of the architecture in a fixed order, with its init rule.
///
/// Standard deviations follow the T5 scheme: `d_model^-0.5` for maps out of
/// the residual stream, `(d_model * d_kv)^-0.5` for queries (which absorbs
/// the usual attention temperature), fan-in scaling for output maps, and
/// unit variance for the token embedding.
fn schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = vec![("shared".to_string(), vec![cfg.vocab_size, d], Init::Normal(1.0))];
    for (stack, layers) in [("encoder", cfg.num_layers_enc), ("decoder", cfg.num_layers_dec)] {
        if layers > 0 {
            out.push((
                format!("{stack}.rel_bias"),
                vec![cfg.num_buckets, cfg.num_heads],
                Init::Normal((d as f64).powf(-0.5)),
            ));
        }
        for i in 0..layers {
            let block = format!("{stack}.block{i}");
            out.push((format!("{block}.attn_norm"), vec![d], Init::Ones));
            attention_schema(&mut out, &format!("{block}.attn"), cfg);
            if stack == "decoder" {
                out.push((format!("{block}.cross_norm"), vec![d], Init::Ones));
                attention_schema(&mut out, &format!("{block}.cross"), cfg);
            }
            out.push((format!("{block}.ffn_norm"), vec![d], Init::Ones));
            ffn_schema(&mut out, &format!("{block}.ffn"), cfg);
        }
        out.push((format!("{stack}.final_norm"), vec![d], Init::Ones));
    }
    if !cfg.tie_embeddings {
        let init = match cfg.head_init {
            HeadInit::Zero => Init::Zeros,
            HeadInit::Normal => Init::Normal((d as f64).powf(-0.5)),
        };
        out.push(("lm_head".to_string(), vec![d, cfg.vocab_size], init));
    }
    out
}

/// Parameter paths and shapes, in initialisation order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    schema(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Parameter tensors bound to a tape for one forward pass.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Element> ModelParams<T> {
    /// Fresh parameters drawn from a seeded generator.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in schema(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => (0..n).map(|_| T::cast(truncated_normal(&mut rng, std))).collect(),
            };
            let t = Tensor::new(shape, data).expect("schema shapes are consistent").requires_grad();
            tensors.insert(name, t);
        }
        Ok(ModelParams { tensors })
    }

    /// Builds a parameter set from named tensors, checking it against the schema.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self, ModelError> {
        let expected = param_shapes(cfg);
        if expected.len() != tensors.len() {
            let missing: Vec<_> = expected.iter().filter(|(n, _)| !tensors.contains_key(n)).map(|(n, _)| n.clone()).collect();
            return Err(ModelError::ParamSet(format!(
                "expected {} tensors, got {} (missing: {missing:?})",
                expected.len(),
                tensors.len()
            )));
        }
        let mut tensors = tensors;
        for (name, shape) in expected {
            let t = tensors
                .get_mut(&name)
                .ok_or_else(|| ModelError::ParamSet(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            t.set_requires_grad(true);
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars, counted from the allocated tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.set_grad(None);
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect();
        ParamVars { vars }
    }

    /// Adds the gradients a tape retained for `vars` into each tensor's
    /// gradient slot. Parameters that took no part in the loss get zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &ParamVars) {
        for (name, var) in vars.iter() {
            let t = self.tensors.get_mut(name).expect("bound from this set");
            match tape.grad(var) {
                Some(g) => t.accumulate_grad(g).expect("tape keeps leaf shapes"),
                None => {
                    if t.grad().is_none() {
                        t.set_grad(Some(vec![T::zero(); t.numel()]));
                    }
                }
            }
        }
    }

    /// Order-sensitive FNV-1a digest of every parameter's bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            name.bytes().for_each(&mut feed);
            buf.clear();
            for &x in t.data() {
                x.write_le(&mut buf);
            }
            buf.iter().copied().for_each(&mut feed);
        }
        h
    }
}
