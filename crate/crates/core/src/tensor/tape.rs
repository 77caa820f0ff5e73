//! Wengert-list autodiff. Nodes are appended in evaluation order, so the
//! tape index order is already a topological order and `backward` simply
//! walks it in reverse.

use std::sync::Arc;

use super::gemm::{gemm, MatView, MatViewMut};
use super::{as_matrix, rms_inverse, softmax_in_place, Scalar, Tensor};
use crate::error::{EloError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed rotary tables, `[max_seq, head_dim / 2]`.
#[derive(Debug)]
pub struct RopeCache<T> {
    half: usize,
    max_seq: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeCache<T> {
    pub fn new(head_dim: usize, max_seq: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(EloError::Config(format!(
                "rotary embeddings need an even head dim, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for pos in 0..max_seq {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Ok(RopeCache {
            half,
            max_seq,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.half * 2
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sum(Var),
    SumSquares(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        seq: usize,
        heads: usize,
        cache: Arc<RopeCache<T>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive grads.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if it does not require grad or
    /// nothing reached it yet.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Leaf if node.requires_grad => node.grad.as_deref(),
            _ => None,
        }
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0];
        match node.op {
            Op::Leaf if node.requires_grad => node.grad.take(),
            _ => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(EloError::shape(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        let out = Tensor::from_vec(av.shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::from_vec(av.shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().map(|&x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(EloError::Config(format!("rms_norm eps must be > 0, got {eps}")));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(EloError::shape(format!(
                "rms_norm gain {:?} vs last dim {d}",
                gv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        let mut inv = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let r = rms_inverse(row, eps);
            inv.push(r);
            for (v, &g) in row.iter_mut().zip(gv.data()) {
                *v = *v * r * g;
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = as_matrix(tv)?;
        if ids.is_empty() {
            return Err(EloError::shape("embedding: no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(EloError::Index {
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotary position embedding on `[batch * seq, heads * head_dim]`;
    /// row `r` sits at position `r % seq`.
    pub fn rope(&mut self, x: Var, seq: usize, heads: usize, cache: &Arc<RopeCache<T>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = as_matrix(xv)?;
        if d != heads * cache.head_dim() || rows % seq != 0 || seq > cache.max_seq {
            return Err(EloError::shape(format!(
                "rope: x {:?} with seq {seq}, heads {heads}, head_dim {}",
                xv.shape(),
                cache.head_dim()
            )));
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, d, seq, heads, cache, false);
        let out = Tensor::from_vec(&[rows, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                seq,
                heads,
                cache: Arc::clone(cache),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over `[batch * seq, d]` projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = as_matrix(qv)?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() || rows != batch * seq || d % heads != 0 {
            return Err(EloError::shape(format!(
                "attention: q {:?} k {:?} v {:?} batch {batch} seq {seq} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::ZERO; batch * heads * seq * seq];
        let mut out = vec![T::ZERO; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * dh;
                let off = (b * heads + h) * seq * seq;
                gemm(
                    seq,
                    dh,
                    seq,
                    MatView::strided(qv.data(), base, d, 1),
                    MatView::strided(kv.data(), base, d, 1).t(),
                    T::ZERO,
                    MatViewMut::strided(&mut probs, off, seq, 1),
                );
                for i in 0..seq {
                    let row = &mut probs[off + i * seq..off + (i + 1) * seq];
                    for s in &mut row[..=i] {
                        *s = *s * scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    for s in &mut row[i + 1..] {
                        *s = T::ZERO;
                    }
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    MatView::strided(&probs, off, seq, 1),
                    MatView::strided(vv.data(), base, d, 1),
                    T::ZERO,
                    MatViewMut::strided(&mut out, base, d, 1),
                );
            }
        }
        let out = Tensor::from_vec(&[rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.numel() / vocab;
        if targets.len() != rows || mask.len() != rows {
            return Err(EloError::shape(format!(
                "cross_entropy: {rows} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(EloError::EmptyLoss);
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::ZERO;
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(EloError::Index { index: t, bound: vocab });
            }
            let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / T::from_f64(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(EloError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.accumulate(loss, vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (parent, contrib) in self.local_grads(i, &g) {
                self.accumulate(parent, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = as_matrix(av).expect("validated in forward");
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        MatView::row_major(g, n),
                        MatView::row_major(bv.data(), n).t(),
                        T::ZERO,
                        MatViewMut::row_major(&mut da, k),
                    );
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        MatView::row_major(av.data(), k).t(),
                        MatView::row_major(g, n),
                        T::ZERO,
                        MatViewMut::row_major(&mut db, n),
                    );
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|&x| x * *s).collect()));
                }
            }
            Op::Silu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let da = x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (T::ONE + x * (T::ONE - s))
                        })
                        .collect();
                    out.push((*a, da));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).numel()]));
                }
            }
            Op::SumSquares(a) => {
                if self.wants(*a) {
                    let two = T::from_f64(2.0);
                    out.push((*a, self.value(*a).data().iter().map(|&x| two * x * g[0]).collect()));
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = self.nodes[i].value.data();
                    let n = self.nodes[i].value.last_dim();
                    let mut da = vec![T::ZERO; y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = T::from_f64(d as f64);
                if self.wants(*x) {
                    let mut dx = vec![T::ZERO; xv.len()];
                    for (((dxr, xr), gr), &r) in dx.chunks_mut(d).zip(xv.chunks(d)).zip(g.chunks(d)).zip(inv) {
                        let dot: T = xr.iter().zip(gr).zip(gv).map(|((&x, &g), &w)| g * w * x).sum();
                        let c = r * r * r * dot / dn;
                        for (((o, &x), &g), &w) in dxr.iter_mut().zip(xr).zip(gr).zip(gv) {
                            *o = r * w * g - x * c;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![T::ZERO; d];
                    for ((xr, gr), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv) {
                        for ((o, &x), &g) in dg.iter_mut().zip(xr).zip(gr) {
                            *o += g * x * r;
                        }
                    }
                    out.push((*gain, dg));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.last_dim();
                    let mut dt = vec![T::ZERO; tv.numel()];
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (o, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::Rope { x, seq, heads, cache } => {
                if self.wants(*x) {
                    let d = self.value(*x).last_dim();
                    let mut dx = g.to_vec();
                    rotate(&mut dx, d, *seq, *heads, cache, true);
                    out.push((*x, dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v, batch, seq, heads) = (*q, *k, *v, *batch, *seq, *heads);
                let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
                let d = self.value(q).last_dim();
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let mut dq = vec![T::ZERO; qv.len()];
                let mut dk = vec![T::ZERO; kv.len()];
                let mut dv = vec![T::ZERO; vv.len()];
                let mut ds = vec![T::ZERO; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * d + h * dh;
                        let off = (b * heads + h) * seq * seq;
                        let p = MatView::strided(probs, off, seq, 1);
                        let go = MatView::strided(g, base, d, 1);
                        gemm(seq, seq, dh, p.t(), go, T::ZERO, MatViewMut::strided(&mut dv, base, d, 1));
                        gemm(
                            seq,
                            dh,
                            seq,
                            go,
                            MatView::strided(vv, base, d, 1).t(),
                            T::ZERO,
                            MatViewMut::row_major(&mut ds, seq),
                        );
                        for i in 0..seq {
                            let pr = &probs[off + i * seq..off + i * seq + i + 1];
                            let dr = &mut ds[i * seq..(i + 1) * seq];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&p, &d)| p * d).sum();
                            for (dv, &p) in dr[..=i].iter_mut().zip(pr) {
                                *dv = p * (*dv - dot) * scale;
                            }
                            for dv in &mut dr[i + 1..] {
                                *dv = T::ZERO;
                            }
                        }
                        let dsv = MatView::row_major(&ds, seq);
                        gemm(
                            seq,
                            seq,
                            dh,
                            dsv,
                            MatView::strided(kv, base, d, 1),
                            T::ZERO,
                            MatViewMut::strided(&mut dq, base, d, 1),
                        );
                        gemm(
                            seq,
                            seq,
                            dh,
                            dsv.t(),
                            MatView::strided(qv, base, d, 1),
                            T::ZERO,
                            MatViewMut::strided(&mut dk, base, d, 1),
                        );
                    }
                }
                for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(var) {
                        out.push((var, grad));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).last_dim();
                    let scale = g[0] / T::from_f64(*count as f64);
                    let mut dl = vec![T::ZERO; probs.len()];
                    for (row, (dr, pr)) in dl.chunks_mut(vocab).zip(probs.chunks(vocab)).enumerate() {
                        if !mask[row] {
                            continue;
                        }
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d = p * scale;
                        }
                        dr[targets[row]] -= scale;
                    }
                    out.push((*logits, dl));
                }
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

fn rotate<T: Scalar>(buf: &mut [T], d: usize, seq: usize, heads: usize, cache: &RopeCache<T>, inverse: bool) {
    let half = cache.half;
    let dh = 2 * half;
    for (r, row) in buf.chunks_mut(d).enumerate() {
        let pos = r % seq;
        let cos = &cache.cos[pos * half..(pos + 1) * half];
        let sin = &cache.sin[pos * half..(pos + 1) * half];
        for h in 0..heads {
            let head = &mut row[h * dh..(h + 1) * dh];
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}
