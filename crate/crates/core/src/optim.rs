//! AdamW, AdamW with per-tensor RMS learning-rate scaling, and Adafactor.
//!
//! The tensor-level functions return the update `delta` (to be added to the
//! parameter) and mutate only the optimizer slot they are given.
//! [`Optimizer`] drives them over a whole [`ModelParams`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite gradient norm {0}")]
    NonFiniteNorm(f64),
    #[error("rms of an empty tensor is undefined")]
    Empty,
    #[error("invalid optimizer hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("optimizer state does not match parameters: {0}")]
    State(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    AdamwRms,
    Adafactor,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::AdamwRms => "adamw_rms",
            OptimizerKind::Adafactor => "adafactor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Floor on the RMS scale factor of the scaled variant.
    pub rms_eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            rms_eps: 1e-3,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidHyper(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps and weight_decay must be nonnegative".into());
        }
        if !(self.rms_eps > 0.0) {
            return bad(format!("rms_eps {} must be positive", self.rms_eps));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdafactorHyper {
    /// Added to squared gradients.
    pub eps1: f64,
    /// Floor on the parameter-scale factor.
    pub eps2: f64,
    /// Update clipping threshold `d`.
    pub clip_threshold: f64,
    /// `c` in the second-moment decay `1 - t^-c`.
    pub decay_rate: f64,
}

impl Default for AdafactorHyper {
    fn default() -> Self {
        AdafactorHyper {
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            decay_rate: 0.8,
        }
    }
}

impl AdafactorHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.eps1 > 0.0) || !(self.eps2 > 0.0) {
            return Err(OptimError::InvalidHyper("eps1 and eps2 must be positive".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(OptimError::InvalidHyper(format!(
                "clip_threshold {} must be positive",
                self.clip_threshold
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(OptimError::InvalidHyper(format!(
                "decay_rate {} outside (0, 1]",
                self.decay_rate
            )));
        }
        Ok(())
    }
}

/// Per-parameter optimizer memory.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot<T> {
    /// First and second moments of the Adam variants.
    Adam { m: Vec<T>, v: Vec<T> },
    /// Adafactor row and column accumulators over the last two axes;
    /// leading axes (if any) index independent matrices.
    Factored {
        rows: usize,
        cols: usize,
        row: Vec<T>,
        col: Vec<T>,
    },
    /// Adafactor second moment of a vector parameter.
    Full { v: Vec<T> },
}

impl<T: Element> Slot<T> {
    pub fn for_param(kind: OptimizerKind, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        match kind {
            OptimizerKind::Adamw | OptimizerKind::AdamwRms => Slot::Adam {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
            OptimizerKind::Adafactor if shape.len() >= 2 => {
                let rows = shape[shape.len() - 2];
                let cols = shape[shape.len() - 1];
                let lead: usize = shape[..shape.len() - 2].iter().product();
                Slot::Factored {
                    rows,
                    cols,
                    row: vec![T::zero(); lead * rows],
                    col: vec![T::zero(); lead * cols],
                }
            }
            OptimizerKind::Adafactor => Slot::Full {
                v: vec![T::zero(); n],
            },
        }
    }

    /// Current second-moment estimate `V̂`, one entry per parameter element.
    pub fn second_moment(&self) -> Vec<T> {
        match self {
            Slot::Adam { v, .. } | Slot::Full { v } => v.clone(),
            Slot::Factored {
                rows,
                cols,
                row,
                col,
            } => {
                let mut out = Vec::with_capacity(row.len() / rows * rows * cols);
                for (r, c) in row.chunks(*rows).zip(col.chunks(*cols)) {
                    let total: T = r.iter().copied().sum();
                    for &ri in r {
                        out.extend(c.iter().map(|&cj| ri * (cj / total)));
                    }
                }
                out
            }
        }
    }

    /// Named buffers for serialisation, with their shapes.
    pub fn buffers(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        match self {
            Slot::Adam { m, v } => vec![("m", vec![m.len()], m), ("v", vec![v.len()], v)],
            Slot::Factored {
                rows,
                cols,
                row,
                col,
            } => vec![
                ("row", vec![row.len() / rows, *rows], row),
                ("col", vec![col.len() / cols, *cols], col),
            ],
            Slot::Full { v } => vec![("v", vec![v.len()], v)],
        }
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match self {
            Slot::Adam { m, v } => vec![("m", m), ("v", v)],
            Slot::Factored { row, col, .. } => vec![("row", row), ("col", col)],
            Slot::Full { v } => vec![("v", v)],
        }
    }
}

/// Root mean square of the entries.
pub fn rms<T: Element>(x: &[T]) -> Result<T, OptimError> {
    if x.is_empty() {
        return Err(OptimError::Empty);
    }
    let ss: T = x.iter().map(|&a| a * a).sum();
    Ok((ss / T::cast(x.len() as f64)).sqrt())
}

fn slot_mismatch(what: &str) -> OptimError {
    OptimError::State(format!("{what} slot expected"))
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// `t` is the step number after incrementing, starting at 1.
pub fn adamw_delta<T: Element>(
    w: &[T],
    g: &[T],
    slot: &mut Slot<T>,
    t: u64,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<Vec<T>, OptimError> {
    let Slot::Adam { m, v } = slot else {
        return Err(slot_mismatch("adam"));
    };
    if m.len() != w.len() || g.len() != w.len() {
        return Err(OptimError::State(format!(
            "{} weights, {} gradients, {} moments",
            w.len(),
            g.len(),
            m.len()
        )));
    }
    let (b1, b2) = (T::cast(hyper.beta1), T::cast(hyper.beta2));
    let one = T::one();
    let c1 = T::cast(1.0 - hyper.beta1.powf(t as f64));
    let c2 = T::cast(1.0 - hyper.beta2.powf(t as f64));
    let (eps, wd, lr) = (T::cast(hyper.eps), T::cast(hyper.weight_decay), T::cast(lr));
    let mut delta = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        delta.push(-lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]));
    }
    Ok(delta)
}

/// AdamW with the learning rate multiplied by `max(rms_eps, rms(w))`,
/// `w` being the parameter before this update.
pub fn adamw_rms_delta<T: Element>(
    w: &[T],
    g: &[T],
    slot: &mut Slot<T>,
    t: u64,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<Vec<T>, OptimError> {
    let scale = rms(w)?.as_f64().max(hyper.rms_eps);
    adamw_delta(w, g, slot, t, hyper, lr * scale)
}

/// One Adafactor update (no momentum, relative step size).
pub fn adafactor_delta<T: Element>(
    w: &[T],
    g: &[T],
    slot: &mut Slot<T>,
    t: u64,
    hyper: &AdafactorHyper,
    lr: f64,
) -> Result<Vec<T>, OptimError> {
    if g.len() != w.len() {
        return Err(OptimError::State(format!(
            "{} weights, {} gradients",
            w.len(),
            g.len()
        )));
    }
    let decay = T::cast(1.0 - (t as f64).powf(-hyper.decay_rate));
    let keep = T::one() - decay;
    let eps1 = T::cast(hyper.eps1);
    match slot {
        Slot::Factored {
            rows,
            cols,
            row,
            col,
        } => {
            let (r, c) = (*rows, *cols);
            if row.len() / r * r * c != w.len() {
                return Err(OptimError::State("factored slot shape".into()));
            }
            for (mi, gm) in g.chunks(r * c).enumerate() {
                let rs = &mut row[mi * r..(mi + 1) * r];
                let cs = &mut col[mi * c..(mi + 1) * c];
                let mut row_sum = vec![T::zero(); r];
                let mut col_sum = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        let sq = gm[i * c + j] * gm[i * c + j] + eps1;
                        row_sum[i] += sq;
                        col_sum[j] += sq;
                    }
                }
                for (a, s) in rs.iter_mut().zip(row_sum) {
                    *a = decay * *a + keep * s;
                }
                for (a, s) in cs.iter_mut().zip(col_sum) {
                    *a = decay * *a + keep * s;
                }
            }
        }
        Slot::Full { v } => {
            if v.len() != w.len() {
                return Err(OptimError::State("vector slot length".into()));
            }
            for (a, &gi) in v.iter_mut().zip(g) {
                *a = decay * *a + keep * (gi * gi + eps1);
            }
        }
        Slot::Adam { .. } => return Err(slot_mismatch("adafactor")),
    }
    let v_hat = slot.second_moment();
    let mut u: Vec<T> = g.iter().zip(&v_hat).map(|(&gi, &vi)| gi / vi.sqrt()).collect();
    let clip = (rms(&u)? / T::cast(hyper.clip_threshold)).max(T::one());
    let step = T::cast(lr * rms(w)?.as_f64().max(hyper.eps2));
    for x in &mut u {
        *x = -step * (*x / clip);
    }
    Ok(u)
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [&mut [T]], max_norm: f64) -> Result<f64, OptimError> {
    if !(max_norm > 0.0) {
        return Err(OptimError::InvalidHyper(format!("max_norm {max_norm} must be positive")));
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(OptimError::NonFiniteNorm(norm));
    }
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    Ok(norm)
}

/// Global L2 norm of all parameter gradients (missing gradients count as zero).
pub fn grad_norm<T: Element>(params: &ModelParams<T>) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Clips the gradients stored on `params`; see [`clip_global_norm`].
pub fn clip_param_grads<T: Element>(params: &mut ModelParams<T>, max_norm: f64) -> Result<f64, OptimError> {
    let mut grads: Vec<&mut [T]> = params.iter_mut().filter_map(|(_, t)| t.grad_mut()).collect();
    clip_global_norm(&mut grads, max_norm)
}

/// Optimizer kind, hyperparameters and per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub adam: AdamHyper,
    pub adafactor: AdafactorHyper,
    /// Number of updates applied so far.
    pub t: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(
        kind: OptimizerKind,
        adam: AdamHyper,
        adafactor: AdafactorHyper,
        params: &ModelParams<T>,
    ) -> Result<Self, OptimError> {
        match kind {
            OptimizerKind::Adafactor => adafactor.validate()?,
            _ => adam.validate()?,
        }
        let slots = params
            .iter()
            .map(|(n, p)| (n.to_string(), Slot::for_param(kind, p.shape())))
            .collect();
        Ok(Optimizer {
            kind,
            adam,
            adafactor,
            t: 0,
            slots,
        })
    }

    pub fn slot(&self, name: &str) -> Option<&Slot<T>> {
        self.slots.get(name)
    }

    /// Applies one update using the gradients stored on `params`.
    ///
    /// Every gradient is checked before anything is modified, so a
    /// non-finite gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut ModelParams<T>, lr: f64) -> Result<(), OptimError> {
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(OptimError::NonFiniteGradient {
                        name: name.to_string(),
                    });
                }
            }
            if !self.slots.contains_key(name) {
                return Err(OptimError::State(format!("no slot for {name}")));
            }
        }
        self.t += 1;
        let t = self.t;
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let slot = self.slots.get_mut(name).expect("checked above");
            let delta = match self.kind {
                OptimizerKind::Adamw => adamw_delta(p.data(), &g, slot, t, &self.adam, lr)?,
                OptimizerKind::AdamwRms => adamw_rms_delta(p.data(), &g, slot, t, &self.adam, lr)?,
                OptimizerKind::Adafactor => {
                    adafactor_delta(p.data(), &g, slot, t, &self.adafactor, lr)?
                }
            };
            for (w, d) in p.data_mut().iter_mut().zip(delta) {
                *w += d;
            }
        }
        Ok(())
    }

    /// State buffers as named tensors, `"{param}.{buffer}"`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, slot) in &self.slots {
            for (buf, shape, data) in slot.buffers() {
                let t = Tensor::new(shape, data.to_vec()).expect("buffer shapes match data");
                out.push((format!("{name}.{buf}"), t));
            }
        }
        out
    }

    /// Restores state saved by [`Optimizer::state_tensors`].
    pub fn load_state(&mut self, t: u64, tensors: &BTreeMap<String, Tensor<T>>) -> Result<(), OptimError> {
        let mut expected = 0;
        for (name, slot) in &mut self.slots {
            for (buf, data) in slot.buffers_mut() {
                expected += 1;
                let key = format!("{name}.{buf}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| OptimError::State(format!("missing buffer {key}")))?;
                if src.numel() != data.len() {
                    return Err(OptimError::State(format!(
                        "buffer {key} has {} entries, expected {}",
                        src.numel(),
                        data.len()
                    )));
                }
                data.copy_from_slice(src.data());
            }
        }
        if expected != tensors.len() {
            return Err(OptimError::State(format!(
                "{} buffers supplied, {expected} expected",
                tensors.len()
            )));
        }
        self.t = t;
        Ok(())
    }
}
