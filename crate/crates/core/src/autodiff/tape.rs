//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! consumes it and returns gradients for the trainable parameters that were
//! reached. Nodes that depend only on constants or frozen parameters carry no
//! gradient and are skipped during the reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Fill value used for masked attention logits. `exp` of it underflows to
/// exactly zero after max-subtraction.
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embedding {
        param: ParamId,
        ids: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SumAll(Var),
    MeanAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    MaskFill {
        a: Var,
        keep: Vec<bool>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients w.r.t. trainable parameters produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds every gradient into the matching `Parameter::grad`.
    pub fn accumulate_into(self, store: &mut ParamStore) {
        for (id, g) in self.grads {
            let dst = store.get_mut(id).grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c (+)= op(a) * op(b)` for row-major contiguous buffers, where `a` is
/// logically `m x k` and `b` is logically `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths are checked above and the strides describe in-bounds
    // row-major layouts of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        let value = p.value.data().to_vec();
        let shape = p.value.shape().to_vec();
        self.push(value, shape, Op::Param(id), p.trainable)
    }

    /// Gathers rows of a 2-D parameter table without copying the table.
    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let p = self.params.get(table);
        let shape = p.value.shape();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {shape:?}")));
        }
        let (rows, dim) = (shape[0], shape[1]);
        let mut value = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: rows,
                });
            }
            value.extend_from_slice(p.value.row(id));
        }
        let trainable = p.trainable;
        Ok(self.push(
            value,
            vec![ids.len(), dim],
            Op::Embedding {
                param: table,
                ids: ids.to_vec(),
            },
            trainable,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`, giving `a · bᵀ` per batch entry).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b), rg))
    }

    /// `a + b` where `b` is a vector broadcast over the trailing axis of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let width = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != width || width == 0 {
            return Err(Error::shape("add_row", format!("{sa:?} + {sb:?}")));
        }
        let vb = self.value(b);
        let out = self
            .value(a)
            .chunks(width)
            .flat_map(|row| row.iter().zip(vb).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], Op::SumAll(a), rg)
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let va = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &va[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= len as f64);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(out, new_shape, Op::MeanAxis { a, outer, len, inner }, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            dims.push((p, s[axis]));
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, d) in &dims {
                out.extend_from_slice(&self.value(p)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                parts: dims,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Replaces entries where `keep` is false with `fill`. `keep` may have
    /// the full element count, or the element count of `a` without its last
    /// axis, in which case whole trailing rows are masked.
    pub fn mask_fill(&mut self, a: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let n = self.value(a).len();
        let keep: Vec<bool> = if keep.len() == n {
            keep.to_vec()
        } else if !keep.is_empty() && n.is_multiple_of(keep.len()) {
            let width = n / keep.len();
            keep.iter().flat_map(|&k| std::iter::repeat_n(k, width)).collect()
        } else {
            return Err(Error::shape(
                "mask_fill",
                format!("mask of {} for {:?}", keep.len(), self.shape(a)),
            ));
        };
        let out = self
            .value(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::MaskFill { a, keep }, rg))
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let width = *self.shape(a).last().unwrap_or(&0);
        if width == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let out = softmax_rows(self.value(a), width);
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Softmax(a), rg))
    }

    /// Mean over rows of `-log softmax(logits)[gold]` for `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != gold.len() || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} gold labels", gold.len()),
            ));
        }
        let (rows, classes) = (s[0], s[1]);
        if let Some(&g) = gold.iter().find(|&&g| g >= classes) {
            return Err(Error::Index {
                what: "class logits",
                index: g,
                bound: classes,
            });
        }
        let x = self.value(logits);
        let probs = softmax_rows(x, classes);
        let mut loss = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[g];
        }
        loss /= rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != labels.len() || x.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} labels", x.len(), labels.len()),
            ));
        }
        let loss = x
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows (along the first axis) of `a`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = shape[0];
        let width = numel(&shape[1..]);
        let va = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&va[i * width..(i + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let rg = self.rg(a);
        Ok(self.push(out, new_shape, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a), rg))
    }

    /// Computes d`loss`/d(param) for every reachable trainable parameter.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        if !ln.value[0].is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients::default();
        if !ln.requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            // Accumulates `f(slot)` into the gradient buffer of `v` if it needs one.
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[v.0].requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let dst = out.grads.entry(*id).or_insert_with(|| vec![0.0; node.value.len()]);
                    dst.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                }
                Op::Embedding { param, ids } => {
                    let table = self.params.value(*param);
                    let dim = table.shape()[1];
                    let dst = out.grads.entry(*param).or_insert_with(|| vec![0.0; table.numel()]);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in dst[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |buf| gemm(*m, *n, *k, &g, false, vb, true, buf, true));
                    acc(*b, &mut |buf| gemm(*k, *m, *n, va, true, &g, false, buf, true));
                }
                Op::BatchMatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |buf| {
                        for i in 0..*batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &vb[i * k * n..(i + 1) * k * n];
                            // dA = dC · op(B)ᵀ
                            gemm(
                                m,
                                n,
                                k,
                                gi,
                                false,
                                bi,
                                !*trans_b,
                                &mut buf[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    });
                    acc(*b, &mut |buf| {
                        for i in 0..*batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &va[i * m * k..(i + 1) * m * k];
                            let bi = &mut buf[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // B stored [n, k]: dB = dCᵀ · A
                                gemm(n, m, k, gi, true, ai, false, bi, true);
                            } else {
                                gemm(k, m, n, ai, true, gi, false, bi, true);
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s));
                    acc(*b, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s));
                }
                Op::AddRow(a, b) => {
                    acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s));
                    acc(*b, &mut |buf| {
                        let w = buf.len();
                        for row in g.chunks(w) {
                            buf.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(&g).zip(vb) {
                            *d += s * y;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((d, s), x) in buf.iter_mut().zip(&g).zip(va) {
                            *d += s * x;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s * c));
                }
                Op::Tanh(a) => {
                    acc(*a, &mut |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(&g).zip(&node.value) {
                            *d += s * (1.0 - y * y);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    acc(*a, &mut |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(&g).zip(&node.value) {
                            *d += s * y * (1.0 - y);
                        }
                    });
                }
                Op::Relu(a) => {
                    acc(*a, &mut |buf| {
                        for ((d, s), y) in buf.iter_mut().zip(&g).zip(&node.value) {
                            if *y > 0.0 {
                                *d += s;
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::MeanAxis { a, outer, len, inner } => {
                    let scale = 1.0 / *len as f64;
                    acc(*a, &mut |buf| {
                        for o in 0..*outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..*len {
                                let off = (o * len + l) * inner;
                                for (d, s) in buf[off..off + inner].iter_mut().zip(src) {
                                    *d += s * scale;
                                }
                            }
                        }
                    });
                }
                Op::Concat { parts, outer, inner } => {
                    let total: usize = parts.iter().map(|(_, d)| d).sum();
                    let mut offset = 0;
                    for &(p, d) in parts {
                        acc(p, &mut |buf| {
                            for o in 0..*outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                                for (dd, s) in buf[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                                    *dd += s;
                                }
                            }
                        });
                        offset += d;
                    }
                }
                Op::MaskFill { a, keep } => {
                    acc(*a, &mut |buf| {
                        for ((d, s), k) in buf.iter_mut().zip(&g).zip(keep) {
                            if *k {
                                *d += s;
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let w = *node.shape.last().unwrap();
                    acc(*a, &mut |buf| {
                        for ((dr, gr), yr) in buf.chunks_mut(w).zip(g.chunks(w)).zip(node.value.chunks(w)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += yi * (gi - dot);
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, gold, probs } => {
                    let rows = gold.len();
                    let classes = probs.len() / rows;
                    let scale = g[0] / rows as f64;
                    acc(*logits, &mut |buf| {
                        for (r, &gi) in gold.iter().enumerate() {
                            for c in 0..classes {
                                let y = if c == gi { 1.0 } else { 0.0 };
                                buf[r * classes + c] += scale * (probs[r * classes + c] - y);
                            }
                        }
                    });
                }
                Op::BceWithLogits { logits, labels } => {
                    let x = &nodes[logits.0].value;
                    let scale = g[0] / labels.len() as f64;
                    acc(*logits, &mut |buf| {
                        for ((d, &z), &y) in buf.iter_mut().zip(x).zip(labels) {
                            *d += scale * (sigmoid(z) - y);
                        }
                    });
                }
                Op::GatherRows { a, idx } => {
                    let width = node.value.len() / idx.len().max(1);
                    acc(*a, &mut |buf| {
                        for (r, &i) in idx.iter().enumerate() {
                            for (d, s) in buf[i * width..(i + 1) * width]
                                .iter_mut()
                                .zip(&g[r * width..(r + 1) * width])
                            {
                                *d += s;
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(d, s)| *d += s));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let i = tape.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![3., 4., 5., 6.]).unwrap());
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3., 4., 5., 6.]);

        let r = tape.constant(Tensor::matrix(1, 2, vec![1., 2.]).unwrap());
        let col = tape.constant(Tensor::matrix(2, 1, vec![3., 4.]).unwrap());
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.shape(d), &[1, 1]);
        assert_eq!(tape.value(d), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::vector(vec![0.0; 5]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y) {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let y = tape.softmax(x).unwrap();
        assert_abs_diff_eq!(tape.value(y)[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y)[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::zeros(vec![1, 5]));
        let l = tape.cross_entropy(x, &[3]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 5f64.ln(), epsilon = 1e-12);

        let x = tape.constant(Tensor::matrix(1, 2, vec![30.0, -30.0]).unwrap());
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!(tape.scalar(l) < 1e-20);

        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let l = tape.cross_entropy(x, &[2]).unwrap();
        // direct evaluation of ln(e + e^2 + e^3) - 3
        let e = std::f64::consts::E;
        let oracle = (e + e * e + e * e * e).ln() - 3.0;
        assert_abs_diff_eq!(tape.scalar(l), oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(tape.scalar(l), 0.40761, epsilon = 1e-5);

        assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn embedding_gather_and_grad() {
        let (s, id) = store_with("t", Tensor::matrix(2, 2, vec![1., 1., 2., 2.]).unwrap());
        let mut tape = Tape::new(&s);
        let e = tape.embedding(id, &[1, 0, 1]).unwrap();
        assert_eq!(tape.value(e), &[2., 2., 1., 1., 2., 2.]);
        let empty = tape.embedding(id, &[]).unwrap();
        assert_eq!(tape.shape(empty), &[0, 2]);
        assert!(matches!(tape.embedding(id, &[2]), Err(Error::Index { .. })));

        let mut tape = Tape::new(&s);
        let e = tape.embedding(id, &[0, 0]).unwrap();
        let l = tape.sum(e);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap(), &[2., 2., 0., 0.]);
    }

    #[test]
    fn elementwise_examples() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(z);
        assert_eq!(tape.scalar(y), 0.5);
        let m = tape.constant(Tensor::matrix(2, 2, vec![1., 3., 5., 7.]).unwrap());
        let mean = tape.mean_axis(m, 0).unwrap();
        assert_eq!(tape.value(mean), &[3., 5.]);
        let mean1 = tape.mean_axis(m, 1).unwrap();
        assert_eq!(tape.value(mean1), &[2., 6.]);

        let (s, id) = store_with("x", Tensor::scalar(0.0));
        let mut tape = Tape::new(&s);
        let x = tape.param(id);
        let t = tape.tanh(x);
        let g = tape.backward(t).unwrap();
        assert_eq!(g.get(id).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_examples() {
        let (s, id) = store_with("p", Tensor::zeros(vec![2, 2]));
        let mut tape = Tape::new(&s);
        let p = tape.param(id);
        let l = tape.sum(p);
        assert_eq!(tape.backward(l).unwrap().get(id).unwrap(), &[1.0; 4]);

        let (s, id) = store_with("p", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&s);
        let p = tape.param(id);
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq);
        assert_eq!(tape.backward(l).unwrap().get(id).unwrap(), &[2.0, 4.0]);

        let mut tape = Tape::new(&s);
        let p = tape.param(id);
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let (mut s, id) = store_with("p", Tensor::vector(vec![1.0, 2.0]));
        s.set_trainable(id, false);
        let mut tape = Tape::new(&s);
        let p = tape.param(id);
        let l = tape.sum(p);
        assert!(tape.backward(l).unwrap().is_empty());
    }

    #[test]
    fn mask_fill_row_broadcast() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let y = tape.mask_fill(x, &[true, false], -1.0).unwrap();
        assert_eq!(tape.value(y), &[1., 2., -1., -1.]);
        assert!(tape.mask_fill(x, &[true, false, true], 0.0).is_err());
    }

    #[test]
    fn concat_middle_axis() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let a = tape.constant(Tensor::new(vec![2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
    }
}
