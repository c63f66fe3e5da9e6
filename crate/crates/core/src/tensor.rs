//! Reverse-mode autodiff over flat row-major tensors.
//!
//! A `Graph` is a tape: every op appends a node holding its output buffer and
//! the input ids it needs for the backward pass. `backward` walks the tape in
//! reverse insertion order. Tensors are immutable once produced; handles are
//! cheap `Arc` clones, so a `Tensor` stays readable after the graph moves on.
//!
//! The op set is exactly what a small encoder-decoder transformer needs, plus
//! `grad_check` for verifying every rule against central differences.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::kernels;
use std::sync::Arc;

pub type NodeId = usize;

/// Handle to a value on a graph. `data` aliases the node's output buffer.
#[derive(Clone, Debug)]
pub struct Tensor<E> {
    pub id: NodeId,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn scalar(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Attention block layout for ragged batches: block `i` holds query rows
/// `q_spans[i]` attending to key/value rows `kv_spans[i]`. `kv_allowed`, when
/// present, disables individual key positions (PAD exclusion).
#[derive(Clone, Debug)]
pub struct AttnSpans {
    pub q_spans: Vec<(usize, usize)>,
    pub kv_spans: Vec<(usize, usize)>,
    pub kv_allowed: Option<Vec<Vec<bool>>>,
}

impl AttnSpans {
    /// Self-attention over consecutive ragged blocks given their lengths.
    pub fn ragged(lens: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in lens {
            spans.push((off, off + l));
            off += l;
        }
        AttnSpans { q_spans: spans.clone(), kv_spans: spans, kv_allowed: None }
    }
}

enum Op<E> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Scale { x: NodeId, c: E },
    Mul { a: NodeId, b: NodeId },
    /// a[m x p] * b[p x n]
    MatMul { a: NodeId, b: NodeId },
    /// a[m x p] * b[n x p]^T
    MatMulNt { a: NodeId, b: NodeId },
    Embed { table: NodeId, ids: Arc<Vec<u32>> },
    Relu { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Arc<Vec<E>>, inv_std: Arc<Vec<E>> },
    Softmax { x: NodeId },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spans: Arc<AttnSpans>,
        heads: usize,
        scale: E,
        /// Saved softmax probabilities per (block, head), each [Lq x Lk];
        /// masking (causal or PAD) is already baked into the zeros.
        probs: Arc<Vec<Vec<E>>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        ignore: Arc<Vec<bool>>,
        smoothing: E,
        /// Softmax rows for non-ignored positions (zeros elsewhere).
        probs: Arc<Vec<E>>,
    },
    Sum { x: NodeId },
    MeanRows { x: NodeId, spans: Arc<Vec<(usize, usize)>> },
    ConcatRows { xs: Vec<NodeId> },
    SliceRows { x: NodeId, r0: usize, r1: usize },
}

struct Node<E> {
    op: Op<E>,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
}

/// Recording tape. Single-threaded per training step; inference builds one
/// graph per forward call and drops it without running backward.
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of gradient buffers materialized by `backward`.
    pub fn grad_buffers(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    fn push(&mut self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Tensor<E> {
        let data = Arc::new(data);
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape: shape.clone(), data: Arc::clone(&data), requires_grad });
        self.grads.push(None);
        Tensor { id, shape, data }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, data: Vec<E>, shape: Vec<usize>) -> Tensor<E> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(Op::Leaf, shape, data, false)
    }

    /// Constant input over an existing buffer without copying.
    pub fn input_shared(&mut self, data: Arc<Vec<E>>, shape: Vec<usize>) -> Tensor<E> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, shape: shape.clone(), data: Arc::clone(&data), requires_grad: false });
        self.grads.push(None);
        Tensor { id, shape, data }
    }

    /// Trainable leaf; `backward` accumulates its gradient.
    pub fn param(&mut self, data: Arc<Vec<E>>, shape: Vec<usize>) -> Tensor<E> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, shape: shape.clone(), data: Arc::clone(&data), requires_grad: true });
        self.grads.push(None);
        Tensor { id, shape, data }
    }

    // ── Elementwise and linear algebra ──────────────────────────────────

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch { op: "add", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = a.data.as_ref().clone();
        kernels::axpy(&mut out, &b.data);
        let rq = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::Add { a: a.id, b: b.id }, a.shape.clone(), out, rq))
    }

    /// x[m x n] + row vector b[n], broadcast over rows.
    pub fn add_bias(&mut self, x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let n = x.cols();
        if b.numel() != n {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: x.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = x.data.as_ref().clone();
        for row in out.chunks_mut(n) {
            kernels::axpy(row, &b.data);
        }
        let rq = self.requires(x.id) || self.requires(b.id);
        Ok(self.push(Op::AddBias { x: x.id, b: b.id }, x.shape.clone(), out, rq))
    }

    pub fn scale(&mut self, x: &Tensor<E>, c: E) -> Tensor<E> {
        let out: Vec<E> = x.data.iter().map(|&v| v * c).collect();
        let rq = self.requires(x.id);
        self.push(Op::Scale { x: x.id, c }, x.shape.clone(), out, rq)
    }

    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch { op: "mul", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let out: Vec<E> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect();
        let rq = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::Mul { a: a.id, b: b.id }, a.shape.clone(), out, rq))
    }

    /// a[m x p] @ b[p x n]
    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, p) = (a.rows(), a.cols());
        let (p2, n) = (b.rows(), b.cols());
        if p != p2 || a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = vec![E::zero(); m * n];
        kernels::mm_nn(&a.data, &b.data, &mut out, m, p, n);
        let rq = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::MatMul { a: a.id, b: b.id }, vec![m, n], out, rq))
    }

    /// a[m x p] @ b[n x p]^T — linear layers with `[out x in]` weights, and
    /// output logits against a tied embedding table.
    pub fn matmul_nt(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, p) = (a.rows(), a.cols());
        let (n, p2) = (b.rows(), b.cols());
        if p != p2 || a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(Error::ShapeMismatch { op: "matmul_nt", lhs: a.shape.clone(), rhs: b.shape.clone() });
        }
        let mut out = vec![E::zero(); m * n];
        kernels::mm_nt(&a.data, &b.data, &mut out, m, p, n);
        let rq = self.requires(a.id) || self.requires(b.id);
        Ok(self.push(Op::MatMulNt { a: a.id, b: b.id }, vec![m, n], out, rq))
    }

    /// Gather rows of `table` at `ids`. Backward scatter-adds.
    pub fn embed(&mut self, table: &Tensor<E>, ids: &[u32]) -> Result<Tensor<E>> {
        let (v, d) = (table.rows(), table.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Vocab(format!("id {bad} out of range (vocab {v})")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table.data[i as usize * d..(i as usize + 1) * d]);
        }
        let rq = self.requires(table.id);
        Ok(self.push(
            Op::Embed { table: table.id, ids: Arc::new(ids.to_vec()) },
            vec![ids.len(), d],
            out,
            rq,
        ))
    }

    pub fn relu(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let out: Vec<E> = x.data.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
        let rq = self.requires(x.id);
        self.push(Op::Relu { x: x.id }, x.shape.clone(), out, rq)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: &Tensor<E>, gain: &Tensor<E>, bias: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let n = x.cols();
        let rows = x.numel() / n;
        if gain.numel() != n || bias.numel() != n {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: x.shape.clone(), rhs: gain.shape.clone() });
        }
        let mut out = vec![E::zero(); x.numel()];
        let mut xhat = vec![E::zero(); x.numel()];
        let mut inv_std = vec![E::zero(); rows];
        let nf = E::from_f64(n as f64);
        for r in 0..rows {
            let xr = &x.data[r * n..(r + 1) * n];
            let mean = xr.iter().copied().sum::<E>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
            let istd = (var + eps).sqrt().recip();
            inv_std[r] = istd;
            for j in 0..n {
                let h = (xr[j] - mean) * istd;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gain.data[j] + bias.data[j];
            }
        }
        let rq = self.requires(x.id) || self.requires(gain.id) || self.requires(bias.id);
        Ok(self.push(
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
            },
            x.shape.clone(),
            out,
            rq,
        ))
    }

    /// Softmax over the last dimension, computed with max-subtraction.
    pub fn softmax_lastdim(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let n = x.cols();
        if n == 0 {
            return Err(Error::ShapeMismatch { op: "softmax_lastdim", lhs: x.shape.clone(), rhs: vec![] });
        }
        let mut out = vec![E::zero(); x.numel()];
        for (o, xr) in out.chunks_mut(n).zip(x.data.chunks(n)) {
            softmax_row(xr, o);
        }
        let rq = self.requires(x.id);
        Ok(self.push(Op::Softmax { x: x.id }, x.shape.clone(), out, rq))
    }

    /// Multi-head scaled dot-product attention over ragged blocks.
    ///
    /// `q`,`k`,`v` are `[T x d]` with heads as contiguous column groups. In
    /// causal mode query row `i` of a block sees key rows `0..=i` of the same
    /// block (requires equal q/kv block lengths); otherwise it sees the whole
    /// block. Keys disabled by `spans.kv_allowed` are excluded for every query.
    pub fn attention(
        &mut self,
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
        spans: Arc<AttnSpans>,
        heads: usize,
        causal: bool,
    ) -> Result<Tensor<E>> {
        let d = q.cols();
        if k.cols() != d || v.cols() != d || d % heads != 0 {
            return Err(Error::ShapeMismatch { op: "attention", lhs: q.shape.clone(), rhs: k.shape.clone() });
        }
        let dh = d / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let nblocks = spans.q_spans.len();
        let mut out = vec![E::zero(); q.numel()];
        let mut probs: Vec<Vec<E>> = vec![Vec::new(); nblocks * heads];
        for (b, (&(q0, q1), &(k0, k1))) in spans.q_spans.iter().zip(spans.kv_spans.iter()).enumerate() {
            let (lq, lk) = (q1 - q0, k1 - k0);
            if causal && lq != lk {
                return Err(Error::ShapeMismatch { op: "attention(causal)", lhs: vec![lq], rhs: vec![lk] });
            }
            let allowed = spans.kv_allowed.as_ref().map(|a| a[b].as_slice());
            for h in 0..heads {
                let qh = pack_head(&q.data, q0, lq, d, h, dh);
                let kh = pack_head(&k.data, k0, lk, d, h, dh);
                let vh = pack_head(&v.data, k0, lk, d, h, dh);
                let mut scores = vec![E::zero(); lq * lk];
                kernels::mm_nt(&qh, &kh, &mut scores, lq, dh, lk);
                for s in scores.iter_mut() {
                    *s = *s * scale;
                }
                let mut p = vec![E::zero(); lq * lk];
                for i in 0..lq {
                    let limit = if causal { i + 1 } else { lk };
                    masked_softmax_row(&scores[i * lk..i * lk + lk], &mut p[i * lk..i * lk + lk], limit, allowed);
                }
                let mut oh = vec![E::zero(); lq * dh];
                kernels::mm_nn(&p, &vh, &mut oh, lq, lk, dh);
                scatter_head(&mut out, &oh, q0, lq, d, h, dh);
                probs[b * heads + h] = p;
            }
        }
        let rq = self.requires(q.id) || self.requires(k.id) || self.requires(v.id);
        Ok(self.push(
            Op::Attention { q: q.id, k: k.id, v: v.id, spans, heads, scale, probs: Arc::new(probs) },
            q.shape.clone(),
            out,
            rq,
        ))
    }

    /// Label-smoothed cross-entropy summed over non-ignored rows.
    ///
    /// Returns the scalar loss and the number of rows that contributed.
    /// Ignored rows add exactly zero loss and zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: &Tensor<E>,
        targets: &[u32],
        ignore: &[bool],
        smoothing: E,
    ) -> Result<(Tensor<E>, usize)> {
        let vcb = logits.cols();
        let rows = logits.rows();
        if targets.len() != rows || ignore.len() != rows {
            return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: vec![rows], rhs: vec![targets.len()] });
        }
        let mut probs = vec![E::zero(); logits.numel()];
        let mut loss = E::zero();
        let mut count = 0usize;
        let eps_v = smoothing / E::from_f64(vcb as f64);
        let conf = E::one() - smoothing + eps_v;
        for r in 0..rows {
            if ignore[r] {
                continue;
            }
            let t = targets[r] as usize;
            if t >= vcb {
                return Err(Error::Vocab(format!("target {t} out of range (vocab {vcb})")));
            }
            let lr = &logits.data[r * vcb..(r + 1) * vcb];
            let pr = &mut probs[r * vcb..(r + 1) * vcb];
            let logz = log_sum_exp(lr);
            let mut smooth_term = E::zero();
            for j in 0..vcb {
                let logp = lr[j] - logz;
                pr[j] = logp.exp();
                smooth_term += logp;
            }
            loss = loss - (conf - eps_v) * (lr[t] - logz) - eps_v * smooth_term;
            count += 1;
        }
        let rq = self.requires(logits.id);
        let t = self.push(
            Op::CrossEntropy {
                logits: logits.id,
                targets: Arc::new(targets.to_vec()),
                ignore: Arc::new(ignore.to_vec()),
                smoothing,
                probs: Arc::new(probs),
            },
            vec![1],
            vec![loss],
            rq,
        );
        Ok((t, count))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.data.iter().copied().sum::<E>();
        let rq = self.requires(x.id);
        self.push(Op::Sum { x: x.id }, vec![1], vec![s], rq)
    }

    /// Mean over each row span; one output row per span.
    pub fn mean_rows(&mut self, x: &Tensor<E>, spans: Arc<Vec<(usize, usize)>>) -> Result<Tensor<E>> {
        let d = x.cols();
        let nspans = spans.len();
        let mut out = vec![E::zero(); nspans * d];
        for (b, &(r0, r1)) in spans.iter().enumerate() {
            if r1 <= r0 || r1 > x.rows() {
                return Err(Error::ShapeMismatch { op: "mean_rows", lhs: vec![r0, r1], rhs: x.shape.clone() });
            }
            let inv = E::from_f64(1.0 / (r1 - r0) as f64);
            for r in r0..r1 {
                for j in 0..d {
                    out[b * d + j] += x.data[r * d + j] * inv;
                }
            }
        }
        let rq = self.requires(x.id);
        Ok(self.push(Op::MeanRows { x: x.id, spans }, vec![nspans, d], out, rq))
    }

    /// Stack tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if xs.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_rows", lhs: vec![0], rhs: vec![] });
        }
        let d = xs[0].cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for x in xs {
            if x.cols() != d {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: vec![d], rhs: x.shape.clone() });
            }
            rows += x.rows();
            out.extend_from_slice(&x.data);
        }
        let rq = xs.iter().any(|x| self.requires(x.id));
        Ok(self.push(Op::ConcatRows { xs: xs.iter().map(|x| x.id).collect() }, vec![rows, d], out, rq))
    }

    /// Rows `r0..r1` of `x`.
    pub fn slice_rows(&mut self, x: &Tensor<E>, r0: usize, r1: usize) -> Result<Tensor<E>> {
        let d = x.cols();
        if r0 >= r1 || r1 > x.rows() {
            return Err(Error::ShapeMismatch { op: "slice_rows", lhs: vec![r0, r1], rhs: x.shape.clone() });
        }
        let out = x.data[r0 * d..r1 * d].to_vec();
        let rq = self.requires(x.id);
        Ok(self.push(Op::SliceRows { x: x.id, r0, r1 }, vec![r1 - r0, d], out, rq))
    }

    /// Inverted dropout as a constant Bernoulli mask; identity at `p == 0`.
    pub fn dropout<R: rand::Rng>(&mut self, x: &Tensor<E>, p: f64, rng: &mut R) -> Result<Tensor<E>> {
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < p { E::zero() } else { keep })
            .collect();
        let m = self.input(mask, x.shape.clone());
        self.mul(x, &m)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Gradient buffer of a node after `backward`, if any flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads[id].as_deref()
    }

    /// Reverse pass from a scalar loss. A graph in which nothing requires
    /// gradients is a no-op: no buffers are allocated.
    pub fn backward(&mut self, loss: &Tensor<E>) -> Result<()> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward(scalar)",
                lhs: self.nodes[loss.id].shape.clone(),
                rhs: vec![1],
            });
        }
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.grads[loss.id] = Some(vec![E::one()]);
        for i in (0..=loss.id).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i);
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<E>>], id: NodeId, delta: &[E]) {
        match &mut grads[id] {
            Some(g) => kernels::axpy(g, delta),
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    fn backward_node(&mut self, i: NodeId) {
        // Inputs always precede outputs on the tape, so split borrows cleanly.
        let (lo, hi) = self.grads.split_at_mut(i);
        let dy = hi[0].as_ref().expect("grad present").clone();
        let nodes = &self.nodes;
        let need = |id: NodeId| nodes[id].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if need(*a) {
                    Self::accumulate(lo, *a, &dy);
                }
                if need(*b) {
                    Self::accumulate(lo, *b, &dy);
                }
            }
            Op::AddBias { x, b } => {
                if need(*x) {
                    Self::accumulate(lo, *x, &dy);
                }
                if need(*b) {
                    let n = nodes[*b].data.len();
                    let mut db = vec![E::zero(); n];
                    for row in dy.chunks(n) {
                        kernels::axpy(&mut db, row);
                    }
                    Self::accumulate(lo, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                if need(*x) {
                    let dx: Vec<E> = dy.iter().map(|&g| g * *c).collect();
                    Self::accumulate(lo, *x, &dx);
                }
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    let da: Vec<E> = dy.iter().zip(nodes[*b].data.iter()).map(|(&g, &v)| g * v).collect();
                    Self::accumulate(lo, *a, &da);
                }
                if need(*b) {
                    let db: Vec<E> = dy.iter().zip(nodes[*a].data.iter()).map(|(&g, &v)| g * v).collect();
                    Self::accumulate(lo, *b, &db);
                }
            }
            Op::MatMul { a, b } => {
                let (m, p) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if need(*a) {
                    // dA = dY @ B^T; B stored [p x n] is already the
                    // transposed operand mm_nt expects.
                    let mut da = vec![E::zero(); m * p];
                    kernels::mm_nt(&dy, &nodes[*b].data, &mut da, m, n, p);
                    Self::accumulate(lo, *a, &da);
                }
                if need(*b) {
                    // dB = A^T @ dY
                    let mut db = vec![E::zero(); p * n];
                    kernels::mm_tn(&nodes[*a].data, &dy, &mut db, m, p, n);
                    Self::accumulate(lo, *b, &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, p) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[0];
                if need(*a) {
                    // dA = dY @ B
                    let mut da = vec![E::zero(); m * p];
                    kernels::mm_nn(&dy, &nodes[*b].data, &mut da, m, n, p);
                    Self::accumulate(lo, *a, &da);
                }
                if need(*b) {
                    // dB = dY^T @ A
                    let mut db = vec![E::zero(); n * p];
                    kernels::mm_tn(&dy, &nodes[*a].data, &mut db, m, n, p);
                    Self::accumulate(lo, *b, &db);
                }
            }
            Op::Embed { table, ids } => {
                if need(*table) {
                    let d = nodes[*table].shape[1];
                    let mut dt = vec![E::zero(); nodes[*table].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(&mut dt[id as usize * d..(id as usize + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                    Self::accumulate(lo, *table, &dt);
                }
            }
            Op::Relu { x } => {
                if need(*x) {
                    let dx: Vec<E> = dy
                        .iter()
                        .zip(nodes[*x].data.iter())
                        .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
                        .collect();
                    Self::accumulate(lo, *x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = nodes[*x].shape[nodes[*x].shape.len() - 1];
                let rows = nodes[*x].data.len() / n;
                let g = &nodes[*gain].data;
                if need(*gain) {
                    let mut dg = vec![E::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += dy[r * n + j] * xhat[r * n + j];
                        }
                    }
                    Self::accumulate(lo, *gain, &dg);
                }
                if need(*bias) {
                    let mut db = vec![E::zero(); n];
                    for row in dy.chunks(n) {
                        kernels::axpy(&mut db, row);
                    }
                    Self::accumulate(lo, *bias, &db);
                }
                if need(*x) {
                    let nf = E::from_f64(n as f64);
                    let mut dx = vec![E::zero(); rows * n];
                    for r in 0..rows {
                        let mut sum_dh = E::zero();
                        let mut sum_dh_xhat = E::zero();
                        for j in 0..n {
                            let dh = dy[r * n + j] * g[j];
                            sum_dh += dh;
                            sum_dh_xhat += dh * xhat[r * n + j];
                        }
                        let istd = inv_std[r];
                        for j in 0..n {
                            let dh = dy[r * n + j] * g[j];
                            dx[r * n + j] = istd * (dh - (sum_dh + xhat[r * n + j] * sum_dh_xhat) / nf);
                        }
                    }
                    Self::accumulate(lo, *x, &dx);
                }
            }
            Op::Softmax { x } => {
                if need(*x) {
                    let n = nodes[i].shape[nodes[i].shape.len() - 1];
                    let y = &nodes[i].data;
                    let mut dx = vec![E::zero(); y.len()];
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &dy[r * n..(r + 1) * n];
                        let dot = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<E>();
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    Self::accumulate(lo, *x, &dx);
                }
            }
            Op::Attention { q, k, v, spans, heads, scale, probs } => {
                let d = nodes[*q].shape[1];
                let dh = d / heads;
                let heads = *heads;
                let mut dq = vec![E::zero(); nodes[*q].data.len()];
                let mut dk = vec![E::zero(); nodes[*k].data.len()];
                let mut dv = vec![E::zero(); nodes[*v].data.len()];
                for (b, (&(q0, q1), &(k0, k1))) in
                    spans.q_spans.iter().zip(spans.kv_spans.iter()).enumerate()
                {
                    let (lq, lk) = (q1 - q0, k1 - k0);
                    for h in 0..heads {
                        let p = &probs[b * heads + h];
                        let qh = pack_head(&nodes[*q].data, q0, lq, d, h, dh);
                        let kh = pack_head(&nodes[*k].data, k0, lk, d, h, dh);
                        let vh = pack_head(&nodes[*v].data, k0, lk, d, h, dh);
                        let doh = pack_head(&dy, q0, lq, d, h, dh);
                        // dV = P^T dO
                        let mut dvh = vec![E::zero(); lk * dh];
                        kernels::mm_tn(p, &doh, &mut dvh, lq, lk, dh);
                        // dP = dO V^T
                        let mut dp = vec![E::zero(); lq * lk];
                        kernels::mm_nt(&doh, &vh, &mut dp, lq, dh, lk);
                        // dS = P o (dP - rowsum(dP o P)); zero where P is zero
                        let mut ds = vec![E::zero(); lq * lk];
                        for r in 0..lq {
                            let pr = &p[r * lk..(r + 1) * lk];
                            let dpr = &dp[r * lk..(r + 1) * lk];
                            let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<E>();
                            for j in 0..lk {
                                ds[r * lk + j] = pr[j] * (dpr[j] - dot) * *scale;
                            }
                        }
                        // dQ = dS K ; dK = dS^T Q
                        let mut dqh = vec![E::zero(); lq * dh];
                        kernels::mm_nn(&ds, &kh, &mut dqh, lq, lk, dh);
                        let mut dkh = vec![E::zero(); lk * dh];
                        kernels::mm_tn(&ds, &qh, &mut dkh, lq, lk, dh);
                        scatter_head_add(&mut dq, &dqh, q0, lq, d, h, dh);
                        scatter_head_add(&mut dk, &dkh, k0, lk, d, h, dh);
                        scatter_head_add(&mut dv, &dvh, k0, lk, d, h, dh);
                    }
                }
                if need(*q) {
                    Self::accumulate(lo, *q, &dq);
                }
                if need(*k) {
                    Self::accumulate(lo, *k, &dk);
                }
                if need(*v) {
                    Self::accumulate(lo, *v, &dv);
                }
            }
            Op::CrossEntropy { logits, targets, ignore, smoothing, probs } => {
                if need(*logits) {
                    let vcb = nodes[*logits].shape[1];
                    let rows = nodes[*logits].shape[0];
                    let g = dy[0];
                    let eps_v = *smoothing / E::from_f64(vcb as f64);
                    let conf = E::one() - *smoothing + eps_v;
                    let mut dl = vec![E::zero(); rows * vcb];
                    for r in 0..rows {
                        if ignore[r] {
                            continue;
                        }
                        let t = targets[r] as usize;
                        let pr = &probs[r * vcb..(r + 1) * vcb];
                        for j in 0..vcb {
                            let q = if j == t { conf } else { eps_v };
                            dl[r * vcb + j] = g * (pr[j] - q);
                        }
                    }
                    Self::accumulate(lo, *logits, &dl);
                }
            }
            Op::Sum { x } => {
                if need(*x) {
                    let dx = vec![dy[0]; nodes[*x].data.len()];
                    Self::accumulate(lo, *x, &dx);
                }
            }
            Op::MeanRows { x, spans } => {
                if need(*x) {
                    let d = nodes[*x].shape[1];
                    let mut dx = vec![E::zero(); nodes[*x].data.len()];
                    for (b, &(r0, r1)) in spans.iter().enumerate() {
                        let inv = E::from_f64(1.0 / (r1 - r0) as f64);
                        for r in r0..r1 {
                            for j in 0..d {
                                dx[r * d + j] += dy[b * d + j] * inv;
                            }
                        }
                    }
                    Self::accumulate(lo, *x, &dx);
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &x in xs {
                    let len = nodes[x].data.len();
                    if need(x) {
                        Self::accumulate(lo, x, &dy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, r0, r1 } => {
                if need(*x) {
                    let d = nodes[*x].shape[1];
                    let mut dx = vec![E::zero(); nodes[*x].data.len()];
                    dx[r0 * d..r1 * d].copy_from_slice(&dy);
                    Self::accumulate(lo, *x, &dx);
                }
            }
        }
        // Interior gradients are dead once consumed; keep leaves for readout.
        if !matches!(self.nodes[i].op, Op::Leaf) {
            self.grads[i] = None;
        }
    }
}

/// Stable softmax of one full row.
fn softmax_row<E: Elem>(x: &[E], out: &mut [E]) {
    let mx = x.iter().copied().fold(E::neg_infinity(), E::max);
    let mut z = E::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    let inv = z.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Softmax restricted to keys `< limit` that are also `allowed`; excluded
/// entries get exactly zero probability.
fn masked_softmax_row<E: Elem>(scores: &[E], out: &mut [E], limit: usize, allowed: Option<&[bool]>) {
    let ok = |j: usize| j < limit && allowed.map_or(true, |a| a[j]);
    let mut mx = E::neg_infinity();
    for (j, &s) in scores.iter().enumerate() {
        if ok(j) && s > mx {
            mx = s;
        }
    }
    let mut z = E::zero();
    for (j, &s) in scores.iter().enumerate() {
        if ok(j) {
            let e = (s - mx).exp();
            out[j] = e;
            z += e;
        } else {
            out[j] = E::zero();
        }
    }
    let inv = z.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Numerically stable log(sum(exp(x))).
pub fn log_sum_exp<E: Elem>(x: &[E]) -> E {
    let mx = x.iter().copied().fold(E::neg_infinity(), E::max);
    let s = x.iter().map(|&v| (v - mx).exp()).sum::<E>();
    mx + s.ln()
}

/// Log-softmax of one row into a fresh buffer (inference scoring helper).
pub fn log_softmax_row<E: Elem>(x: &[E]) -> Vec<E> {
    let z = log_sum_exp(x);
    x.iter().map(|&v| v - z).collect()
}

fn pack_head<E: Elem>(x: &[E], row0: usize, rows: usize, d: usize, h: usize, dh: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        let base = (row0 + r) * d + h * dh;
        out.extend_from_slice(&x[base..base + dh]);
    }
    out
}

fn scatter_head<E: Elem>(x: &mut [E], part: &[E], row0: usize, rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        let base = (row0 + r) * d + h * dh;
        x[base..base + dh].copy_from_slice(&part[r * dh..(r + 1) * dh]);
    }
}

fn scatter_head_add<E: Elem>(x: &mut [E], part: &[E], row0: usize, rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        let base = (row0 + r) * d + h * dh;
        kernels::axpy(&mut x[base..base + dh], &part[r * dh..(r + 1) * dh]);
    }
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Max relative disagreement between the analytic gradient of `f` at `x0`
/// and central finite differences with step `eps`.
///
/// `f` must rebuild its computation from scratch on the supplied graph and
/// return a scalar. Relative error per coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<E: Elem, F>(mut f: F, x0: &[E], shape: &[usize], eps: E) -> Result<f64>
where
    F: FnMut(&mut Graph<E>, &Tensor<E>) -> Result<Tensor<E>>,
{
    if eps <= E::zero() {
        return Err(Error::Config("grad_check: eps must be positive".into()));
    }
    let mut g = Graph::new();
    let xt = g.param(Arc::new(x0.to_vec()), shape.to_vec());
    let loss = f(&mut g, &xt)?;
    if loss.numel() != 1 {
        return Err(Error::ShapeMismatch { op: "grad_check(scalar f)", lhs: loss.shape, rhs: vec![1] });
    }
    g.backward(&loss)?;
    let analytic: Vec<E> = g.grad(xt.id).map(|s| s.to_vec()).unwrap_or_else(|| vec![E::zero(); x0.len()]);

    let mut eval = |x: &[E]| -> Result<E> {
        let mut g = Graph::new();
        let xt = g.param(Arc::new(x.to_vec()), shape.to_vec());
        let loss = f(&mut g, &xt)?;
        Ok(loss.scalar())
    };
    let mut worst = 0.0f64;
    let mut xbuf = x0.to_vec();
    for i in 0..x0.len() {
        let orig = xbuf[i];
        xbuf[i] = orig + eps;
        let fp = eval(&xbuf)?.to_f64();
        xbuf[i] = orig - eps;
        let fm = eval(&xbuf)?.to_f64();
        xbuf[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps.to_f64());
        let a = analytic[i].to_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}


/// Named gradient checks for every differentiable op, on seeded random
/// inputs in the requested precision. Returns `(op name, max rel error)`.
pub fn standard_op_grad_checks<E: Elem>(eps: E) -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
    let d = 8usize;
    let rows = 5usize;
    let mut rv = |n: usize| -> Vec<E> {
        (0..n).map(|_| E::from_f64(rng.gen_range(-1.0..1.0))).collect()
    };
    let x0 = rv(rows * d);
    let other = rv(rows * d);
    let bias = rv(d);
    let w = rv(d * 4);
    let wnt = rv(6 * d);
    let gain: Vec<E> = rv(d).iter().map(|&v| v + E::from_f64(1.5)).collect();
    let lbias = rv(d);
    let table = rv(3 * d);
    let wq = rv(d * d);
    let wk = rv(d * d);
    let wv = rv(d * d);
    let ce_logits = rv(rows * 4);
    let mut out = Vec::new();

    let mut check = |name: &'static str,
                     x: &[E],
                     shape: &[usize],
                     f: &mut dyn FnMut(&mut Graph<E>, &Tensor<E>) -> Result<Tensor<E>>|
     -> Result<()> {
        let err = grad_check(|g, t| f(g, t), x, shape, eps)?;
        out.push((name, err));
        Ok(())
    };

    check("add/add_bias/scale", &x0, &[rows, d], &mut |g, x| {
        let o = g.input(other.clone(), vec![rows, d]);
        let b = g.input(bias.clone(), vec![d]);
        let s = g.add(x, &o)?;
        let s = g.add_bias(&s, &b)?;
        let s = g.scale(&s, E::from_f64(0.7));
        Ok(g.sum(&s))
    })?;
    check("matmul+relu", &x0, &[rows, d], &mut |g, x| {
        let wt = g.input(w.clone(), vec![d, 4]);
        let y = g.matmul(x, &wt)?;
        let y = g.relu(&y);
        let sq = g.mul(&y, &y)?;
        Ok(g.sum(&sq))
    })?;
    check("matmul_nt", &wnt, &[6, d], &mut |g, x| {
        let at = g.input(x0.clone(), vec![rows, d]);
        let y = g.matmul_nt(&at, x)?;
        let sq = g.mul(&y, &y)?;
        Ok(g.sum(&sq))
    })?;
    check("layer_norm(x)", &x0, &[rows, d], &mut |g, x| {
        let gt = g.input(gain.clone(), vec![d]);
        let bt = g.input(lbias.clone(), vec![d]);
        let y = g.layer_norm(x, &gt, &bt, E::from_f64(1e-5))?;
        let sq = g.mul(&y, &y)?;
        Ok(g.sum(&sq))
    })?;
    check("layer_norm(gain)", &gain, &[d], &mut |g, gn| {
        let xt = g.input(x0.clone(), vec![rows, d]);
        let bt = g.input(lbias.clone(), vec![d]);
        let y = g.layer_norm(&xt, gn, &bt, E::from_f64(1e-5))?;
        let sq = g.mul(&y, &y)?;
        Ok(g.sum(&sq))
    })?;
    check("embed", &table, &[3, d], &mut |g, t| {
        let e = g.embed(t, &[0, 2, 1, 2])?;
        let sq = g.mul(&e, &e)?;
        Ok(g.sum(&sq))
    })?;
    check("softmax_lastdim", &x0, &[rows, d], &mut |g, x| {
        let y = g.softmax_lastdim(x)?;
        let wts: Vec<E> = (0..rows * d).map(|i| E::from_f64((i % 3) as f64)).collect();
        let wt = g.input(wts, vec![rows, d]);
        let y = g.mul(&y, &wt)?;
        Ok(g.sum(&y))
    })?;
    check("cross_entropy(ignore,smooth)", &ce_logits, &[rows, 4], &mut |g, x| {
        let (loss, _) = g.cross_entropy(
            x,
            &[1, 0, 3, 2, 1],
            &[false, true, false, false, true],
            E::from_f64(0.1),
        )?;
        Ok(loss)
    })?;
    check("attention(full)", &x0, &[rows, d], &mut |g, x| {
        attention_probe(g, x, &wq, &wk, &wv, rows, d, false)
    })?;
    check("attention(causal)", &x0, &[rows, d], &mut |g, x| {
        attention_probe(g, x, &wq, &wk, &wv, rows, d, true)
    })?;
    check("concat/slice/mean_rows", &x0, &[rows, d], &mut |g, x| {
        let y = g.slice_rows(x, 1, 4)?;
        let z = g.concat_rows(&[&y, x])?;
        let spans = Arc::new(vec![(0usize, 3usize), (3, 8)]);
        let m = g.mean_rows(&z, spans)?;
        let sq = g.mul(&m, &m)?;
        Ok(g.sum(&sq))
    })?;
    Ok(out)
}

fn attention_probe<E: Elem>(
    g: &mut Graph<E>,
    x: &Tensor<E>,
    wq: &[E],
    wk: &[E],
    wv: &[E],
    rows: usize,
    d: usize,
    causal: bool,
) -> Result<Tensor<E>> {
    let spans = Arc::new(AttnSpans::ragged(&[3, rows - 3]));
    let wq = g.input(wq.to_vec(), vec![d, d]);
    let wk = g.input(wk.to_vec(), vec![d, d]);
    let wv = g.input(wv.to_vec(), vec![d, d]);
    let q = g.matmul_nt(x, &wq)?;
    let k = g.matmul_nt(x, &wk)?;
    let v = g.matmul_nt(x, &wv)?;
    let o = g.attention(&q, &k, &v, spans, 2, causal)?;
    let sq = g.mul(&o, &o)?;
    Ok(g.sum(&sq))
}
