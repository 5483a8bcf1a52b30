use rand::Rng;

use super::kernels::{self, MatRef};
use super::{Element, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// `b` is either the same shape as `a` or `a`'s shape without its leading dim.
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        /// `b` carries its own batch dimension.
        batched: bool,
    },
    SwapAxes {
        a: Var,
        d0: usize,
        d1: usize,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Gelu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        ignore_index: i64,
        count: usize,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Retained gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// Records operations in evaluation order.
///
/// Nodes are appended as they are computed, so every node's inputs precede
/// it and a reverse sweep is a valid topological order for backward.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf; trainable tensors get gradients.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: n.grad.clone(),
            requires_grad: n.requires_grad,
        }
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient retained on a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb || (!sa.is_empty() && &sa[1..] == sb) {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Elementwise sum; `b` may omit `a`'s leading dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_check("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<T> = va
            .iter()
            .zip(vb.iter().cycle())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    /// Elementwise product; `b` may omit `a`'s leading dimension.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_check("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<T> = va
            .iter()
            .zip(vb.iter().cycle())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, factor }, rg)
    }

    /// Matrix product over the last two dimensions.
    ///
    /// `a` is `[.., m, k]`. `b` is either `[k, n]`, shared across all leading
    /// dimensions of `a`, or `[batch, k, n]` matching a `[batch, m, k]` `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sb.len() > 3 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (batched, kb, n) = if sb.len() == 2 {
            (false, sb[0], sb[1])
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(mismatch());
            }
            (true, sb[1], sb[2])
        };
        if k != kb {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let va = self.value(a);
        let vb = self.value(b);
        if batched {
            for bi in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    MatRef::plain(&va[bi * m * k..(bi + 1) * m * k]),
                    MatRef::plain(&vb[bi * k * n..(bi + 1) * k * n]),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        } else {
            kernels::gemm(
                batch * m,
                k,
                n,
                MatRef::plain(va),
                MatRef::plain(vb),
                &mut out,
                false,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                batched,
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(TensorError::Dimension {
                op: "transpose",
                msg: format!("axes ({d0}, {d1}) invalid for shape {shape:?}"),
            });
        }
        let (d0, d1) = (d0.min(d1), d0.max(d1));
        if d0 == d1 {
            return self.reshape(a, &shape);
        }
        let out = kernels::swap_axes(self.value(a), &shape, d0, d1);
        let mut new_shape = shape;
        new_shape.swap(d0, d1);
        let rg = self.rg(a);
        Ok(self.push(new_shape, out, Op::SwapAxes { a, d0, d1 }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Dimension {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Dimension {
                op: "concat",
                msg: format!("axis {axis} invalid for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::new();
        for o in 0..outer {
            for &p in parts {
                let chunk = self.value(p).len() / outer.max(1);
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[rows, d]` table, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Dimension {
                op: "embedding",
                msg: format!("table must be 2-d, got {shape:?}"),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        let tv = self.value(table);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id as i64,
                    size: rows,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid { a }, rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or(TensorError::Dimension {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        if cols == 0 {
            return Err(TensorError::Dimension {
                op: "softmax",
                msg: "empty last dimension".into(),
            });
        }
        let out = kernels::softmax_rows(self.value(a), cols);
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a }, rg))
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var, TensorError> {
        if mask.len() != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "masked_fill",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// `weight * x / sqrt(mean(x^2) + eps)` over the last dimension.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: T) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(TensorError::Dimension {
                op: "rms_norm",
                msg: "last dimension is empty".into(),
            });
        }
        if self.shape(weight) != [d] {
            return Err(TensorError::Shape {
                op: "rms_norm",
                lhs: shape,
                rhs: self.shape(weight).to_vec(),
            });
        }
        let xv = self.value(x);
        let wv = self.value(weight);
        let dn = T::cast(d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn + eps;
            if ms <= T::zero() {
                return Err(TensorError::NonFinite("rms_norm"));
            }
            let r = T::one() / ms.sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &w)| w * v * r));
        }
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(shape, out, Op::RmsNorm { x, w: weight, inv_rms }, rg))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// the survivors. A zero rate records nothing.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = T::cast(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Dropout { a, mask }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n, vocab]` logits. Rows whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let vocab = shape[1];
        let mut count = 0usize;
        for &t in targets {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    size: vocab,
                });
            }
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::UndefinedMean);
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            let row = &lv[i * vocab..(i + 1) * vocab];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[t as usize];
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - log_z).exp();
            }
        }
        let loss = total / T::cast(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                count,
                probs,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum { a }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are added into the retained gradient of every trainable
    /// leaf, so calling this twice without [`Tape::zero_grads`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalar(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(adj, *a, g);
                }
                if self.rg(*b) {
                    let nb = self.value(*b).len();
                    let mut gb = vec![T::zero(); nb];
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                    accumulate_owned(adj, *b, gb);
                }
            }
            Op::Mul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.rg(*a) {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(vb.iter().cycle())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate_owned(adj, *a, ga);
                }
                if self.rg(*b) {
                    let nb = vb.len();
                    let mut gb = vec![T::zero(); nb];
                    for (gc, ac) in g.chunks(nb).zip(va.chunks(nb)) {
                        for ((x, &gy), &ay) in gb.iter_mut().zip(gc).zip(ac) {
                            *x += gy * ay;
                        }
                    }
                    accumulate_owned(adj, *b, gb);
                }
            }
            Op::Scale { a, factor } => {
                let ga = g.iter().map(|&x| x * *factor).collect();
                accumulate_owned(adj, *a, ga);
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                batched,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    if *batched {
                        for bi in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                MatRef::plain(&g[bi * m * n..(bi + 1) * m * n]),
                                MatRef::t(&vb[bi * k * n..(bi + 1) * k * n]),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                false,
                            );
                        }
                    } else {
                        kernels::gemm(
                            batch * m,
                            n,
                            k,
                            MatRef::plain(g),
                            MatRef::t(vb),
                            &mut ga,
                            false,
                        );
                    }
                    accumulate_owned(adj, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    if *batched {
                        for bi in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                MatRef::t(&va[bi * m * k..(bi + 1) * m * k]),
                                MatRef::plain(&g[bi * m * n..(bi + 1) * m * n]),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                false,
                            );
                        }
                    } else {
                        kernels::gemm(
                            k,
                            batch * m,
                            n,
                            MatRef::t(va),
                            MatRef::plain(g),
                            &mut gb,
                            false,
                        );
                    }
                    accumulate_owned(adj, *b, gb);
                }
            }
            Op::SwapAxes { a, d0, d1 } => {
                let ga = kernels::swap_axes(g, &node.shape, *d0, *d1);
                accumulate_owned(adj, *a, ga);
            }
            Op::Reshape { a } => accumulate(adj, *a, g),
            Op::Concat { parts, outer } => {
                let outer = (*outer).max(1);
                let mut offset = 0;
                let row: usize = g.len() / outer;
                for &p in parts {
                    let chunk = self.value(p).len() / outer;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(chunk * outer);
                        for o in 0..outer {
                            let start = o * row + offset;
                            gp.extend_from_slice(&g[start..start + chunk]);
                        }
                        accumulate_owned(adj, p, gp);
                    }
                    offset += chunk;
                }
            }
            Op::Gather { table, ids } => {
                let tshape = self.shape(*table);
                let d = tshape[1];
                let mut gt = vec![T::zero(); tshape[0] * d];
                for (row, &id) in g.chunks(d).zip(ids) {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(x, &y)| *x += y);
                }
                accumulate_owned(adj, *table, gt);
            }
            Op::Gelu { a } => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&gy, &x)| gy * kernels::gelu_grad(x))
                    .collect();
                accumulate_owned(adj, *a, ga);
            }
            Op::Sigmoid { a } => {
                let ga = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gy, &y)| gy * y * (T::one() - y))
                    .collect();
                accumulate_owned(adj, *a, ga);
            }
            Op::Softmax { a } => {
                let cols = *node.shape.last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(node.value.chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&x, &y)| y * (x - dot)));
                }
                accumulate_owned(adj, *a, ga);
            }
            Op::MaskedFill { a, mask } => {
                let ga = g
                    .iter()
                    .zip(mask)
                    .map(|(&x, &m)| if m { T::zero() } else { x })
                    .collect();
                accumulate_owned(adj, *a, ga);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let d = wv.len();
                let dn = T::cast(d as f64);
                if self.rg(*x) {
                    let mut gx = Vec::with_capacity(xv.len());
                    for ((gr, xr), &r) in g.chunks(d).zip(xv.chunks(d)).zip(inv_rms) {
                        let dot: T = gr
                            .iter()
                            .zip(xr)
                            .zip(wv)
                            .map(|((&gy, &xi), &wi)| gy * wi * xi)
                            .sum();
                        let coef = r * r * r * dot / dn;
                        gx.extend(
                            gr.iter()
                                .zip(xr)
                                .zip(wv)
                                .map(|((&gy, &xi), &wi)| r * wi * gy - coef * xi),
                        );
                    }
                    accumulate_owned(adj, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); d];
                    for ((gr, xr), &r) in g.chunks(d).zip(xv.chunks(d)).zip(inv_rms) {
                        for ((acc, &gy), &xi) in gw.iter_mut().zip(gr).zip(xr) {
                            *acc += gy * xi * r;
                        }
                    }
                    accumulate_owned(adj, *w, gw);
                }
            }
            Op::Dropout { a, mask } => {
                let ga = g.iter().zip(mask).map(|(&x, &m)| x * m).collect();
                accumulate_owned(adj, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                count,
                probs,
            } => {
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / T::cast(*count as f64);
                let mut gl = vec![T::zero(); probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *ignore_index {
                        continue;
                    }
                    let row = &mut gl[i * vocab..(i + 1) * vocab];
                    for (x, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *x = p * scale;
                    }
                    row[t as usize] -= scale;
                }
                accumulate_owned(adj, *logits, gl);
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                accumulate_owned(adj, *a, vec![g[0]; n]);
            }
        }
    }
}

fn accumulate<T: Element>(adj: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned<T: Element>(adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
