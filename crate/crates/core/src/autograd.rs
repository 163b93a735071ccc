//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op in creation order, so walking the
//! nodes backwards is a valid topological order for the backward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{gelu, gelu_grad, layer_norm_forward, softmax_in_place, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Pure inference; nothing is differentiable.
    None,
    /// Only parameters with `frozen == false`. Gradients still flow through
    /// frozen weights to reach trainable ones below them.
    Trainable,
    /// Every parameter, frozen or not.
    All,
}

/// Packing of several sequences into one row-stacked matrix for attention.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    /// `(first_row, len)` per sequence; rows of different sequences never
    /// attend to each other.
    pub segments: Vec<(usize, usize)>,
    /// Per-row key validity. Invalid keys get zero attention weight.
    pub key_valid: Vec<bool>,
    pub n_heads: usize,
    offsets: Vec<usize>,
}

impl AttentionLayout {
    pub fn new(segments: Vec<(usize, usize)>, key_valid: Vec<bool>, n_heads: usize) -> Self {
        let mut offsets = Vec::with_capacity(segments.len());
        let mut acc = 0;
        for &(_, len) in &segments {
            offsets.push(acc);
            acc += len * len * n_heads;
        }
        Self {
            segments,
            key_valid,
            n_heads,
            offsets,
        }
    }

    /// Single sequence spanning all rows.
    pub fn single(key_valid: Vec<bool>, n_heads: usize) -> Self {
        let n = key_valid.len();
        Self::new(vec![(0, n)], key_valid, n_heads)
    }

    pub fn rows(&self) -> usize {
        self.key_valid.len()
    }

    fn prob_len(&self) -> usize {
        self.segments
            .iter()
            .map(|&(_, l)| l * l * self.n_heads)
            .sum()
    }

    /// Offset of the `len × len` probability block for `(segment, head)`.
    pub fn block_offset(&self, segment: usize, head: usize) -> usize {
        let len = self.segments[segment].1;
        self.offsets[segment] + head * len * len
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Gelu(usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: Arc<AttentionLayout>,
        probs: Vec<T>,
    },
    GatherRows { src: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    Pick { src: usize, idx: Vec<(usize, usize)> },
    Dropout { x: usize, mask: Vec<T> },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    BceLogits {
        x: usize,
        targets: Vec<T>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = &(ParamId, Tensor<T>)> {
        self.params.iter()
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, g)| g.is_finite()) && self.leaves.values().all(|g| g.is_finite())
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    mode: GradMode,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: GradMode) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
        }
    }

    pub fn inference() -> Self {
        Self::new(GradMode::None)
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which side of zero every ReLU input landed on, in node order.
    pub fn relu_signs(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a].value.data().iter().map(|&x| x > T::zero()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        self.mode != GradMode::None && ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Input tensor; with `requires_grad` its gradient is reported by
    /// [`Gradients::leaf`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.mode != GradMode::None;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = match self.mode {
            GradMode::None => false,
            GradMode::Trainable => !p.frozen,
            GradMode::All => true,
        };
        let v = self.push(p.tensor.clone(), Op::Param(id), rg);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ` with `b` stored row-major as n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: true,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err("add", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.len() != d {
            return shape_err("add_row", xv.shape(), bv.shape());
        }
        let mut data = xv.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                for (a, &b) in row.iter_mut().zip(bv.data()) {
                    *a += b;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddRow(x.0, bias.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err("mul", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| p * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| gelu(p)).collect())
            .expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Gelu(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&p| p.max(T::zero())).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Relu(a.0), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return shape_err("layer_norm", xv.shape(), gv.shape());
        }
        let (y, xhat, rstd) = layer_norm_forward(xv.data(), d, gv.data(), bv.data(), T::of_f64(eps));
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = crate::tensor::softmax_rows(self.value(x));
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Softmax(x.0), rg)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    /// `q`, `k`, `v` are N×D with D divisible by the head count.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return shape_err("attention", qv.shape(), kv.shape());
        }
        let n = qv.rows();
        let d = qv.last_dim();
        if layout.rows() != n || layout.n_heads == 0 || d % layout.n_heads != 0 {
            return shape_err("attention", qv.shape(), &[layout.rows(), layout.n_heads]);
        }
        let h = layout.n_heads;
        let dh = d / h;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); layout.prob_len()];
        for (s, &(start, len)) in layout.segments.iter().enumerate() {
            let valid = &layout.key_valid[start..start + len];
            if !valid.iter().any(|&b| b) {
                continue;
            }
            for head in 0..h {
                let off = layout.block_offset(s, head);
                let c0 = head * dh;
                for i in 0..len {
                    let row = &mut probs[off + i * len..off + (i + 1) * len];
                    let qi = &qd[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..len {
                        if valid[j] {
                            let kj = &kd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                            let sc = dot(qi, kj) * scale;
                            row[j] = sc;
                            max = max.max(sc);
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..len {
                        if valid[j] {
                            let e = (row[j] - max).exp();
                            row[j] = e;
                            sum += e;
                        } else {
                            row[j] = T::zero();
                        }
                    }
                    let oi = &mut out[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for j in 0..len {
                        if valid[j] {
                            row[j] = row[j] / sum;
                            let p = row[j];
                            let vj = &vd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                            for (o, &x) in oi.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Head-separated attention probabilities recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionLayout, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Some((layout.as_ref(), probs.as_slice())),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let d = sv.last_dim();
        let rows = sv.rows();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return shape_err("gather_rows", sv.shape(), &[i]);
            }
            data.extend_from_slice(sv.row(i));
        }
        let out = Tensor::matrix(idx.len(), d, data)?;
        let rg = self.rg(&[src.0]);
        Ok(self.push(
            out,
            Op::GatherRows {
                src: src.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts
            .first()
            .map(|&p| self.value(p).last_dim())
            .ok_or_else(|| Error::DegenerateBatch("concat of nothing".into()))?;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.last_dim() != d {
                return shape_err("concat_rows", &[d], pv.shape());
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d.max(1);
        let out = Tensor::matrix(rows, d, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    /// Selects individual `(row, col)` entries into a vector.
    pub fn pick(&mut self, src: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let sv = self.value(src);
        let d = sv.last_dim();
        let rows = sv.rows();
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= rows || c >= d {
                return shape_err("pick", sv.shape(), &[r, c]);
            }
            data.push(sv.data()[r * d + c]);
        }
        let rg = self.rg(&[src.0]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                src: src.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Dropout { x: x.0, mask }, rg)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])`; rows with weight 0 are
    /// skipped entirely.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let b = lv.rows();
        if targets.len() != b || weights.len() != b {
            return shape_err("cross_entropy", lv.shape(), &[targets.len()]);
        }
        let mut probs = vec![T::zero(); b * v];
        let mut loss = T::zero();
        let weights: Vec<T> = weights.iter().map(|&w| T::of_f64(w)).collect();
        for i in 0..b {
            if weights[i] == T::zero() {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::TokenId { id: t, size: v });
            }
            let row = &mut probs[i * v..(i + 1) * v];
            row.copy_from_slice(lv.row(i));
            let target_logit = row[t];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            loss += weights[i] * (lse - target_logit);
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over the positions where `ignore` is false.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        if ignore.len() != targets.len() {
            return shape_err("cross_entropy", &[targets.len()], &[ignore.len()]);
        }
        let kept = ignore.iter().filter(|&&i| !i).count();
        if kept == 0 {
            return Err(Error::DegenerateBatch("every position is ignored".into()));
        }
        let w: Vec<f64> = ignore
            .iter()
            .map(|&i| if i { 0.0 } else { 1.0 / kept as f64 })
            .collect();
        self.cross_entropy_weighted(logits, targets, &w)
    }

    /// Weighted binary cross-entropy on logits: `Σ w·(softplus(x) − y·x)`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != targets.len() || targets.len() != weights.len() {
            return shape_err("bce_with_logits", xv.shape(), &[targets.len()]);
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::of_f64(t)).collect();
        let weights: Vec<T> = weights.iter().map(|&t| T::of_f64(t)).collect();
        let mut loss = T::zero();
        for ((&z, &y), &w) in xv.data().iter().zip(&targets).zip(&weights) {
            loss += w * (z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln());
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                x: x.0,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut out = Gradients {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[i].take() else { continue };
            let t = Tensor::new(node.value.shape().to_vec(), g)?;
            match node.op {
                Op::Param(id) => out.params.push((id, t)),
                Op::Leaf => {
                    out.leaves.insert(i, t);
                }
                _ => {}
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].requires_grad;
        let len_of = |i: usize| nodes[i].value.len();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if needs(*a) {
                    let ga = buf(grads, *a, m * k);
                    if *trans_b {
                        // dA = dC · B, B is n×k
                        T::gemm(m, n, k, g, (n as isize, 1), bv.data(), (k as isize, 1), T::one(), ga);
                    } else {
                        // dA = dC · Bᵀ, B is k×n
                        T::gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), T::one(), ga);
                    }
                }
                if needs(*b) {
                    let gb = buf(grads, *b, k * n);
                    if *trans_b {
                        // dB = dCᵀ · A, n×k
                        T::gemm(n, m, k, g, (1, n as isize), av.data(), (k as isize, 1), T::one(), gb);
                    } else {
                        // dB = Aᵀ · dC, k×n
                        T::gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for &x in &[*a, *b] {
                    if needs(x) {
                        add_into(buf(grads, x, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if needs(*x) {
                    add_into(buf(grads, *x, g.len()), g);
                }
                if needs(*bias) {
                    let d = len_of(*bias);
                    let gb = buf(grads, *bias, d);
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if needs(*a) {
                    let ga = buf(grads, *a, g.len());
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if needs(*b) {
                    let gb = buf(grads, *b, g.len());
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let ga = buf(grads, *a, g.len());
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi * *c;
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = len_of(*a);
                    let ga = buf(grads, *a, n);
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let xv = nodes[*a].value.data();
                    let ga = buf(grads, *a, g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(x);
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let xv = nodes[*a].value.data();
                    let ga = buf(grads, *a, g.len());
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(xv) {
                        if x > T::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = len_of(*gamma);
                let gam = nodes[*gamma].value.data();
                if needs(*gamma) {
                    let gg = buf(grads, *gamma, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = buf(grads, *beta, d);
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if needs(*x) {
                    let gx = buf(grads, *x, g.len());
                    let inv_d = T::one() / T::of_f64(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gam[j];
                            mean_dh += dxhat[j];
                            mean_dhh += dxhat[j] * hrow[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dhh = mean_dhh * inv_d;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let ga = buf(grads, *a, g.len());
                    for ((grow, yrow), orow) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            orow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.backprop_attention(*q, *k, *v, layout, probs, g, grads),
            Op::GatherRows { src, idx } => {
                if needs(*src) {
                    let d = nodes[*src].value.last_dim();
                    let gs = buf(grads, *src, len_of(*src));
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len_of(p);
                    if needs(p) {
                        add_into(buf(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Pick { src, idx } => {
                if needs(*src) {
                    let d = nodes[*src].value.last_dim();
                    let gs = buf(grads, *src, len_of(*src));
                    for (&(r, c), &gi) in idx.iter().zip(g) {
                        gs[r * d + c] += gi;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    let gx = buf(grads, *x, g.len());
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if needs(*logits) {
                    let v = nodes[*logits].value.last_dim();
                    let gl = buf(grads, *logits, len_of(*logits));
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let s = g[0] * w;
                        let prow = &probs[i * v..(i + 1) * v];
                        let orow = &mut gl[i * v..(i + 1) * v];
                        for j in 0..v {
                            orow[j] += s * prow[j];
                        }
                        orow[t] = orow[t] - s;
                    }
                }
            }
            Op::BceLogits { x, targets, weights } => {
                if needs(*x) {
                    let xv = nodes[*x].value.data();
                    let gx = buf(grads, *x, xv.len());
                    for i in 0..xv.len() {
                        let sig = T::one() / (T::one() + (-xv[i]).exp());
                        gx[i] += g[0] * weights[i] * (sig - targets[i]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: usize,
        k: usize,
        v: usize,
        layout: &AttentionLayout,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (qd, kd, vd) = (
            nodes[q].value.data(),
            nodes[k].value.data(),
            nodes[v].value.data(),
        );
        let n = nodes[q].value.rows();
        let d = nodes[q].value.last_dim();
        let h = layout.n_heads;
        let dh = d / h;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gv = vec![T::zero(); n * d];
        let mut dp = Vec::new();
        for (s, &(start, len)) in layout.segments.iter().enumerate() {
            let valid = &layout.key_valid[start..start + len];
            if !valid.iter().any(|&b| b) {
                continue;
            }
            dp.resize(len, T::zero());
            for head in 0..h {
                let off = layout.block_offset(s, head);
                let c0 = head * dh;
                for i in 0..len {
                    let p = &probs[off + i * len..off + (i + 1) * len];
                    let ri = (start + i) * d + c0;
                    let gi = &g[ri..ri + dh];
                    let mut sdot = T::zero();
                    for j in 0..len {
                        if valid[j] {
                            let rj = (start + j) * d + c0;
                            dp[j] = dot(gi, &vd[rj..rj + dh]);
                            sdot += p[j] * dp[j];
                        }
                    }
                    for j in 0..len {
                        if !valid[j] {
                            continue;
                        }
                        let rj = (start + j) * d + c0;
                        let ds = p[j] * (dp[j] - sdot) * scale;
                        for c in 0..dh {
                            gq[ri + c] += ds * kd[rj + c];
                            gk[rj + c] += ds * qd[ri + c];
                            gv[rj + c] += p[j] * gi[c];
                        }
                    }
                }
            }
        }
        for (idx, local) in [(q, gq), (k, gk), (v, gv)] {
            if nodes[idx].requires_grad {
                add_into(buf(grads, idx, n * d), &local);
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn buf<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Tensor<f64>) -> f64 {
        let mut g = Graph::new(GradMode::All);
        let x = g.leaf(x0.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.leaf(x).unwrap().clone();
        let mut worst: f64 = 0.0;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new(GradMode::None);
                let x = g.leaf(t, false);
                let l = build(&mut g, x);
                g.value(l).item().unwrap()
            };
            let h = 1e-5;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((a - fd).abs() / denom);
        }
        worst
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed, 0);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f32>::new(GradMode::All);
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.leaf(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new(GradMode::All);
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_subgraph_has_no_grad() {
        let mut g = Graph::<f32>::new(GradMode::All);
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.leaf(c).is_none());
        assert_eq!(grads.leaf(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let w1 = sample(&[4, 5], 1);
        let w2 = sample(&[5, 3], 2);
        let err = fd_check(
            move |g, x| {
                let a = g.constant(w1.clone());
                let b = g.constant(w2.clone());
                let h = g.matmul(x, a).unwrap();
                let h = g.gelu(h);
                let o = g.matmul(h, b).unwrap();
                let o2 = g.mul(o, o).unwrap();
                g.sum(o2)
            },
            sample(&[3, 4], 3),
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn matmul_nt_gradient_for_both_operands() {
        let other = sample(&[6, 4], 5);
        let o2 = other.clone();
        // gradient w.r.t. the left operand
        let err = fd_check(
            move |g, x| {
                let b = g.constant(o2.clone());
                let y = g.matmul_nt(x, b).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            },
            sample(&[3, 4], 6),
        );
        assert!(err < 1e-5, "{err}");
        // and the right operand
        let left = sample(&[3, 4], 7);
        let err = fd_check(
            move |g, x| {
                let a = g.constant(left.clone());
                let y = g.matmul_nt(a, x).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y)
            },
            other,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn layer_norm_and_softmax_gradients() {
        let gamma = sample(&[5], 11);
        let beta = sample(&[5], 12);
        let proj = sample(&[4, 5], 13);
        let err = fd_check(
            move |g, x| {
                let gm = g.constant(gamma.clone());
                let bt = g.constant(beta.clone());
                let p = g.constant(proj.clone());
                let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
                let s = g.softmax_rows(y);
                let s = g.mul(s, p).unwrap();
                g.sum(s)
            },
            sample(&[4, 5], 14),
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_gradients_with_masked_keys() {
        let layout = Arc::new(AttentionLayout::new(
            vec![(0, 4), (4, 3)],
            vec![true, false, true, true, true, true, false],
            2,
        ));
        let wk = sample(&[4, 4], 21);
        let wv = sample(&[4, 4], 22);
        let target = sample(&[7, 4], 23);
        let err = fd_check(
            move |g, x| {
                let k_w = g.constant(wk.clone());
                let v_w = g.constant(wv.clone());
                let t = g.constant(target.clone());
                let k = g.matmul(x, k_w).unwrap();
                let v = g.matmul(x, v_w).unwrap();
                let o = g.attention(x, k, v, layout.clone()).unwrap();
                let o = g.mul(o, t).unwrap();
                g.sum(o)
            },
            sample(&[7, 4], 24),
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_ignores_masked_key_contents() {
        let layout = Arc::new(AttentionLayout::single(vec![true, true, false], 1));
        let run = |pad: f32| {
            let mut g = Graph::<f32>::inference();
            let x = g.constant(Tensor::from_rows(&[&[1.0, 0.5], &[0.2, -0.3], &[0.0, 0.0]]).unwrap());
            let mut kv = Tensor::<f32>::from_rows(&[&[0.3, 0.1], &[-0.2, 0.7], &[0.0, 0.0]]).unwrap();
            kv.data_mut()[4] = pad;
            kv.data_mut()[5] = -pad;
            let k = g.constant(kv);
            let o = g.attention(x, k, k, layout.clone()).unwrap();
            g.value(o).data()[..4].to_vec()
        };
        assert_eq!(run(0.0), run(123.0));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::inference();
        let l = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let ce = g.cross_entropy(l, &[0], &[false]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(ce).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);

        let uni = g.constant(Tensor::zeros(&[3, 512]));
        let ce = g.cross_entropy(uni, &[1, 2, 3], &[false, false, false]).unwrap();
        assert!((g.value(ce).item().unwrap() - 512f64.ln()).abs() < 1e-9);

        let mut peaked = Tensor::zeros(&[1, 10]);
        peaked.data_mut()[4] = 1e4;
        let p = g.constant(peaked);
        let ce = g.cross_entropy(p, &[4], &[false]).unwrap();
        assert!(g.value(ce).item().unwrap() < 1e-9);

        assert!(matches!(
            g.cross_entropy(l, &[0], &[true]),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn cross_entropy_and_bce_gradients() {
        let err = fd_check(
            |g, x| g.cross_entropy(x, &[2, 0, 1], &[false, true, false]).unwrap(),
            sample(&[3, 4], 31),
        );
        assert!(err < 1e-5, "{err}");
        let err = fd_check(
            |g, x| g.bce_with_logits(x, &[1.0, 0.0, 1.0], &[0.5, 1.0, 2.0]).unwrap(),
            sample(&[3], 32),
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gather_concat_pick_gradients() {
        let err = fd_check(
            |g, x| {
                let a = g.gather_rows(x, &[2, 0, 2]).unwrap();
                let b = g.concat_rows(&[a, x]).unwrap();
                let b2 = g.mul(b, b).unwrap();
                let p = g.pick(b2, &[(0, 1), (4, 0), (1, 1)]).unwrap();
                g.sum(p)
            },
            sample(&[3, 2], 41),
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn frozen_params_skipped_in_trainable_mode() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add_filled("w", &[2, 2], 0.5).unwrap();
        let u = store.add_filled("u", &[2, 2], 0.25).unwrap();
        store.set_frozen(w, true);
        for (mode, expect_w) in [(GradMode::Trainable, false), (GradMode::All, true)] {
            let mut g = Graph::new(mode);
            let x = g.constant(Tensor::filled(&[1, 2], 1.0));
            let pu = g.param(&store, u);
            let pw = g.param(&store, w);
            let h = g.matmul(x, pu).unwrap();
            let h = g.matmul(h, pw).unwrap();
            let l = g.sum(h);
            let grads = g.backward(l).unwrap();
            assert!(grads.param(u).is_some());
            assert_eq!(grads.param(w).is_some(), expect_w);
        }
    }
}
