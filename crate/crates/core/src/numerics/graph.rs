//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and stores
//! `∂loss/∂leaf` on every leaf created with `requires_grad = true`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::gemm;
use super::{Mask, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Silu(usize),
    Exp(usize),
    Softmax(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    HeadScale {
        x: usize,
        s: usize,
    },
    SliceLast {
        x: usize,
        start: usize,
    },
    RepeatHeads {
        x: usize,
        group: usize,
    },
    Rope {
        x: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording of a computation.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let value = value.check_finite(name)?;
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("variable from another graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("variable from another graph")].requires_grad
    }

    /// Gradient stored on a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.idx(v).ok().and_then(|i| self.nodes[i].grad.as_ref())
    }

    fn same_shape(&self, a: usize, b: usize, op: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(|x| c * x);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]` (or `[..., k, m]` when `trans_a`), `b` is either
    /// batched with the same leading extent or a plain matrix shared by every
    /// batch entry.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {sa:?}{} x {sb:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batch: usize = sb[..sb.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        if b_batched && (sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::Shape(format!("matmul batch dimensions differ: {sa:?} vs {sb:?}")));
        }
        debug_assert!(!b_batched || b_batch == batch);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(&out_shape);
        {
            let ad = self.nodes[ai].value.data();
            let bd = self.nodes[bi].value.data();
            let od = out.data_mut();
            for i in 0..batch {
                let bs = if b_batched { &bd[i * k * n..(i + 1) * k * n] } else { bd };
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    trans_a,
                    bs,
                    trans_b,
                    &mut od[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(ai) || self.rg(bi);
        self.push(
            out,
            Op::MatMul { a: ai, b: bi, trans_a, trans_b, batch, b_batched, m, k, n },
            rg,
            "matmul",
        )
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg, "silu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg, "exp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_inner(a, None)
    }

    /// Softmax over the last axis restricted to positions the mask allows.
    /// Disallowed positions get weight exactly zero. The mask is
    /// `[rows, cols]` and broadcasts over all leading axes.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        self.softmax_inner(a, Some(mask))
    }

    fn softmax_inner(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let ai = self.idx(a)?;
        let x = &self.nodes[ai].value;
        let shape = x.shape();
        if shape.is_empty() {
            return Err(Error::Shape("softmax of a scalar".into()));
        }
        let cols = shape[shape.len() - 1];
        if cols == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        if let Some(m) = mask {
            if shape.len() < 2 || shape[shape.len() - 2] != m.rows() || cols != m.cols() {
                return Err(Error::Shape(format!(
                    "mask [{}, {}] does not match scores {shape:?}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let mut out = Tensor::zeros(shape);
        let mask_rows = mask.map(|m| m.rows()).unwrap_or(1);
        for (r, (xr, yr)) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)).enumerate() {
            let allowed = mask.map(|m| m.row(r % mask_rows));
            let ok = |j: usize| allowed.is_none_or(|al| al[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument("softmax row with no allowed positions".into()));
            }
            let mut sum = 0.0;
            for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
                if ok(j) {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            let inv = 1.0 / sum;
            yr.iter_mut().for_each(|y| *y *= inv);
        }
        let rg = self.rg(ai);
        self.push(out, Op::Softmax(ai), rg, "softmax")
    }

    /// `gain ∘ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xi, gi) = (self.idx(x)?, self.idx(gain)?);
        let xv = &self.nodes[xi].value;
        let gv = &self.nodes[gi].value;
        let d = *xv.shape().last().ok_or_else(|| Error::Shape("rmsnorm of a scalar".into()))?;
        if d == 0 {
            return Err(Error::Shape("rmsnorm over a zero-length vector".into()));
        }
        if gv.shape() != [d] {
            return Err(Error::Shape(format!("rmsnorm gain {:?} vs width {d}", gv.shape())));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        for (xr, yr) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gv.data()) {
                *y = g * v * r;
            }
        }
        let rg = self.rg(xi) || self.rg(gi);
        self.push(out, Op::RmsNorm { x: xi, gain: gi, inv_rms }, rg, "rmsnorm")
    }

    /// Gather rows of a `[n, d]` table; output is `out_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let tv = &self.nodes[ti].value;
        if tv.ndim() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-D, got {:?}", tv.shape())));
        }
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!("{} ids for output shape {out_shape:?}", ids.len())));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { token: id, vocab: n });
            }
            data.extend_from_slice(tv.row(id));
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(ti);
        self.push(out, Op::Embedding { table: ti, ids: ids.to_vec() }, rg, "embedding")
    }

    /// `[batch*seq, heads*dk]` → `[batch, heads, seq, dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::Shape(format!("split_heads({batch}, {seq}, {heads}) of {s:?}")));
        }
        let dk = s[1] / heads;
        let out = permute_bthd(xv.data(), batch, seq, heads, dk, false);
        let out = Tensor::new(&[batch, heads, seq, dk], out)?;
        let rg = self.rg(xi);
        self.push(out, Op::SplitHeads { x: xi, batch, seq, heads }, rg, "split_heads")
    }

    /// `[batch, heads, seq, dk]` → `[batch*seq, heads*dk]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("merge_heads of {s:?}")));
        }
        let (batch, heads, seq, dk) = (s[0], s[1], s[2], s[3]);
        let out = permute_bthd(xv.data(), batch, seq, heads, dk, true);
        let out = Tensor::new(&[batch * seq, heads * dk], out)?;
        let rg = self.rg(xi);
        self.push(out, Op::MergeHeads { x: xi, batch, seq, heads }, rg, "merge_heads")
    }

    /// Multiply each head slice `x[:, h, ...]` by `s[h]`.
    pub fn head_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let xv = &self.nodes[xi].value;
        let sv = &self.nodes[si].value;
        let shape = xv.shape();
        if shape.len() < 2 || sv.shape() != [shape[1]] {
            return Err(Error::Shape(format!("head_scale of {shape:?} by {:?}", sv.shape())));
        }
        let heads = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out = xv.clone();
        for (c, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let f = sv.data()[c % heads];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(xi) || self.rg(si);
        self.push(out, Op::HeadScale { x: xi, s: si }, rg, "head_scale")
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let shape = xv.shape();
        let d = *shape.last().ok_or_else(|| Error::Shape("slice of a scalar".into()))?;
        if start + len > d {
            return Err(Error::Shape(format!("slice {start}..{} of width {d}", start + len)));
        }
        let mut data = Vec::with_capacity(xv.len() / d.max(1) * len);
        for row in xv.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(xi);
        self.push(out, Op::SliceLast { x: xi, start }, rg, "slice_last")
    }

    /// `[b, kv, ...]` → `[b, kv*group, ...]`; output head `h` copies input
    /// head `h / group`.
    pub fn repeat_heads(&mut self, x: Var, group: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let shape = xv.shape();
        if shape.len() < 2 || group == 0 {
            return Err(Error::Shape(format!("repeat_heads({group}) of {shape:?}")));
        }
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(xv.len() * group);
        for chunk in xv.data().chunks(inner.max(1)) {
            for _ in 0..group {
                data.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] *= group;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(xi);
        self.push(out, Op::RepeatHeads { x: xi, group }, rg, "repeat_heads")
    }

    /// Rotate adjacent pairs `(2i, 2i+1)` of `[b, h, seq, dk]` by
    /// `positions[t] · base^(-2i/dk)`.
    pub fn rope(&mut self, x: Var, positions: &[f64], base: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let shape = xv.shape();
        if shape.len() != 4 || shape[2] != positions.len() {
            return Err(Error::Shape(format!(
                "rope of {shape:?} with {} positions",
                positions.len()
            )));
        }
        let dk = shape[3];
        if !dk.is_multiple_of(2) {
            return Err(Error::Shape(format!("rope needs an even head width, got {dk}")));
        }
        let half = dk / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let theta = p * base.powf(-2.0 * i as f64 / dk as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let seq = shape[2];
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(dk).enumerate() {
            let t = r % seq;
            for i in 0..half {
                let (c, s) = (cos[t * half + i], sin[t * half + i]);
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = x0 * c - x1 * s;
                row[2 * i + 1] = x0 * s + x1 * c;
            }
        }
        let rg = self.rg(xi);
        self.push(out, Op::Rope { x: xi, cos, sin }, rg, "rope")
    }

    /// Mean cross-entropy (natural log) of `[n, vocab]` logits over rows
    /// where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        if lv.ndim() != 2 || targets.len() != lv.shape()[0] || mask.len() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy of {:?} with {} targets and {} mask entries",
                lv.shape(),
                targets.len(),
                mask.len()
            )));
        }
        let vocab = lv.shape()[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy with an empty mask".into()));
        }
        let mut total = 0.0;
        for (r, row) in lv.data().chunks(vocab).enumerate() {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
            total += log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(li);
        self.push(
            out,
            Op::CrossEntropy { logits: li, targets: targets.to_vec(), mask: mask.to_vec(), count },
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ai].value.sum());
        let rg = self.rg(ai);
        self.push(out, Op::Sum(ai), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar `loss`. Gradients land on leaves created
    /// with `requires_grad`; the graph cannot be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::ones(self.nodes[li].value.shape()));
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].grad = Some(g.check_finite("backward")?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let mut acc = |j: usize, t: Tensor| {
            if !nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign_scaled(&t, 1.0),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if nodes[*a].requires_grad {
                    acc(*a, zip(g, val(*b), |x, y| x * y));
                }
                if nodes[*b].requires_grad {
                    acc(*b, zip(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape())?),
            &Op::MatMul { a, b, trans_a, trans_b, batch, b_batched, m, k, n } => {
                let ad = val(a).data();
                let bd = val(b).data();
                if nodes[a].requires_grad {
                    let mut da = Tensor::zeros(val(a).shape());
                    let dd = da.data_mut();
                    for bi in 0..batch {
                        let bs = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let out = &mut dd[bi * m * k..(bi + 1) * m * k];
                        if trans_a {
                            // stored a is k×m: grad = op(b)·gᵀ
                            gemm(k, n, m, bs, trans_b, gs, true, out, 0.0);
                        } else {
                            gemm(m, n, k, gs, false, bs, !trans_b, out, 0.0);
                        }
                    }
                    acc(a, da);
                }
                if nodes[b].requires_grad {
                    let mut db = Tensor::zeros(val(b).shape());
                    let dd = db.data_mut();
                    for bi in 0..batch {
                        let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let (out, beta) = if b_batched {
                            (&mut dd[bi * k * n..(bi + 1) * k * n], 0.0)
                        } else {
                            (&mut dd[..], if bi == 0 { 0.0 } else { 1.0 })
                        };
                        if trans_b {
                            // stored b is n×k: grad = gᵀ·op(a)
                            gemm(n, m, k, gs, true, as_, trans_a, out, beta);
                        } else {
                            gemm(k, m, n, as_, !trans_a, gs, false, out, beta);
                        }
                    }
                    acc(b, db);
                }
            }
            Op::Silu(a) => acc(
                *a,
                zip(g, val(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Exp(a) => acc(*a, zip(g, val(i), |gv, y| gv * y)),
            Op::Softmax(a) => {
                let y = val(i);
                let cols = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(y.shape());
                for ((yr, gr), dr) in
                    y.data().chunks(cols).zip(gd.chunks(cols)).zip(dx.data_mut().chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let gainv = val(*gain).data();
                let d = gainv.len();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = vec![0.0; d];
                for (((xr, gr), dr), &r) in xv
                    .data()
                    .chunks(d)
                    .zip(gd.chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                    .zip(inv_rms)
                {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j] * r;
                        dot += gr[j] * gainv[j] * xr[j];
                    }
                    let c = r * r * r * dot / d as f64;
                    for j in 0..d {
                        dr[j] = r * gr[j] * gainv[j] - c * xr[j];
                    }
                }
                if nodes[*x].requires_grad {
                    acc(*x, dx);
                }
                acc(*gain, Tensor::from_vec(dgain));
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                let dd = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dd[id * d + j] += gd[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            &Op::SplitHeads { x, batch, seq, heads } => {
                let dk = val(x).shape()[1] / heads;
                let data = permute_bthd(gd, batch, seq, heads, dk, true);
                acc(x, Tensor::new(val(x).shape(), data)?);
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                let dk = val(x).shape()[3];
                let data = permute_bthd(gd, batch, seq, heads, dk, false);
                acc(x, Tensor::new(val(x).shape(), data)?);
            }
            &Op::HeadScale { x, s } => {
                let xv = val(x);
                let sv = val(s).data();
                let heads = sv.len();
                let inner: usize = xv.shape()[2..].iter().product();
                if nodes[x].requires_grad {
                    let mut dx = g.clone();
                    for (c, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let f = sv[c % heads];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(x, dx);
                }
                if nodes[s].requires_grad {
                    let mut ds = vec![0.0; heads];
                    for (c, (gc, xc)) in gd.chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                        ds[c % heads] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                    acc(s, Tensor::from_vec(ds));
                }
            }
            &Op::SliceLast { x, start } => {
                let xv = val(x);
                let d = *xv.shape().last().unwrap();
                let len = *g.shape().last().unwrap();
                let mut dx = Tensor::zeros(xv.shape());
                for (dr, gr) in dx.data_mut().chunks_mut(d).zip(gd.chunks(len)) {
                    dr[start..start + len].copy_from_slice(gr);
                }
                acc(x, dx);
            }
            &Op::RepeatHeads { x, group } => {
                let xv = val(x);
                let inner: usize = xv.shape()[2..].iter().product::<usize>().max(1);
                let mut dx = Tensor::zeros(xv.shape());
                for (c, dc) in dx.data_mut().chunks_mut(inner).enumerate() {
                    for r in 0..group {
                        let src = &gd[(c * group + r) * inner..(c * group + r + 1) * inner];
                        dc.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                acc(x, dx);
            }
            Op::Rope { x, cos, sin } => {
                let shape = val(*x).shape();
                let (seq, dk) = (shape[2], shape[3]);
                let half = dk / 2;
                let mut dx = g.clone();
                for (r, row) in dx.data_mut().chunks_mut(dk).enumerate() {
                    let t = r % seq;
                    for j in 0..half {
                        let (c, s) = (cos[t * half + j], sin[t * half + j]);
                        let (g0, g1) = (row[2 * j], row[2 * j + 1]);
                        row[2 * j] = g0 * c + g1 * s;
                        row[2 * j + 1] = -g0 * s + g1 * c;
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let lv = val(*logits);
                let vocab = lv.shape()[1];
                let scale = gd[0] / *count as f64;
                let mut dl = Tensor::zeros(lv.shape());
                for (r, (row, dr)) in lv.data().chunks(vocab).zip(dl.data_mut().chunks_mut(vocab)).enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    let lse = log_sum_exp(row);
                    for (d, &v) in dr.iter_mut().zip(row) {
                        *d = (v - lse).exp() * scale;
                    }
                    dr[targets[r]] -= scale;
                }
                acc(*logits, dl);
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), gd[0])),
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Permute between `[b, t, h, d]` (row-major, i.e. `[b*t, h*d]`) and
/// `[b, h, t, d]`. `inverse` maps the latter back to the former.
fn permute_bthd(src: &[f64], batch: usize, seq: usize, heads: usize, dk: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let bthd = ((b * seq + t) * heads + h) * dk;
                let bhtd = ((b * heads + h) * seq + t) * dk;
                let (from, to) = if inverse { (bhtd, bthd) } else { (bthd, bhtd) };
                out[to..to + dk].copy_from_slice(&src[from..from + dk]);
            }
        }
    }
    out
}
