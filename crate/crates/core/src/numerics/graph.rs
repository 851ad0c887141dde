//! Define-by-run reverse-mode autodiff over 2-D fp32 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Every node keeps its
//! gradient after [`Graph::backward`], so intermediate activations (for
//! example the embedded input rows) can be inspected as well as leaves.

use std::sync::Arc;

use super::kernels::{self, AttnMask};
use super::tensor::Tensor;
use crate::error::{Result, SarError};
use crate::masks::BoolMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Per-position rotation angles for RoPE, `half = head_dim / 2` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
    pub half: usize,
}

impl RopeTable {
    pub fn from_angles(angles: &[f32], half: usize) -> Self {
        Self {
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
            half,
        }
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / self.half.max(1)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable>,
        head_dim: usize,
        rows_per_seq: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    MaskedSoftmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        targets: Vec<usize>,
        weights: Vec<f32>,
        weight_sum: f32,
    },
    ConcatSegments {
        parts: Vec<(Var, usize)>,
        batch: usize,
    },
    Sum(Var),
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f32>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

fn dims_err(what: &str, a: &[usize], b: &[usize]) -> SarError {
    SarError::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.values[a.0].dims2();
        let (k2, n) = self.values[b.0].dims2();
        if k != k2 {
            return Err(dims_err("matmul", self.values[a.0].shape(), self.values[b.0].shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.values[a.0].data(), self.values[b.0].data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let r = self.req(&[a, b]);
        Ok(self.push(t, r, Op::MatMul(a, b)))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(dims_err(what, self.values[a.0].shape(), self.values[b.0].shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(t, r, Op::Add(a, b)))
    }

    /// `a[m, n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.values[a.0].dims2();
        if self.values[bias.0].len() != n {
            return Err(dims_err("add_bias", self.values[a.0].shape(), self.values[bias.0].shape()));
        }
        let b = self.values[bias.0].data();
        let data = self.values[a.0]
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let r = self.req(&[a, bias]);
        Ok(self.push(t, r, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(t, r, Op::Mul(a, b)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self.values[a.0].data().iter().map(|&x| kernels::silu(x)).collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let r = self.req(&[a]);
        Ok(self.push(t, r, Op::Silu(a)))
    }

    /// Gathers rows of `table` (`[vocab, d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.values[table.0].dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(SarError::OutOfRange { index: id, limit: vocab });
            }
            data.extend_from_slice(self.values[table.0].row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let r = self.req(&[table]);
        Ok(self.push(t, r, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, d) = self.values[x.0].dims2();
        if self.values[gain.0].len() != d {
            return Err(dims_err("rmsnorm", self.values[x.0].shape(), self.values[gain.0].shape()));
        }
        let mut out = vec![0.0; m * d];
        let mut inv_rms = vec![0.0; m];
        kernels::rmsnorm(
            self.values[x.0].data(),
            self.values[gain.0].data(),
            d,
            &mut out,
            &mut inv_rms,
        );
        let t = Tensor::new(vec![m, d], out)?;
        let r = self.req(&[x, gain]);
        Ok(self.push(t, r, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Applies RoPE to `x` (`[batch * rows_per_seq, width]`); data row `r`
    /// uses table row `r % rows_per_seq`.
    pub fn rope(
        &mut self,
        x: Var,
        table: Arc<RopeTable>,
        head_dim: usize,
        rows_per_seq: usize,
    ) -> Result<Var> {
        let (m, width) = self.values[x.0].dims2();
        if head_dim == 0 || width % head_dim != 0 || table.half * 2 != head_dim {
            return Err(SarError::Dimension(format!(
                "rope: width {width}, head_dim {head_dim}, table half {}",
                table.half
            )));
        }
        if rows_per_seq == 0 || m % rows_per_seq != 0 || table.rows() < rows_per_seq {
            return Err(SarError::Dimension(format!(
                "rope: {m} rows with {rows_per_seq} rows per sequence and {} table rows",
                table.rows()
            )));
        }
        let mut data = self.values[x.0].data().to_vec();
        kernels::rope_rows(&mut data, width, head_dim, &table.cos, &table.sin, |r| r % rows_per_seq, false);
        let t = Tensor::new(vec![m, width], data)?;
        let r = self.req(&[x]);
        Ok(self.push(t, r, Op::Rope { x, table, head_dim, rows_per_seq }))
    }

    /// Batched multi-head attention. `q` is `[batch * lq, width]`, `k` and `v`
    /// are `[batch * lk, width]`; the same `mask` (`lq x lk`, or full when
    /// `None`) applies to every sequence in the batch.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        mask: Option<&BoolMatrix>,
    ) -> Result<Var> {
        let (mq, width) = self.values[q.0].dims2();
        let (mk, wk) = self.values[k.0].dims2();
        if wk != width || self.values[v.0].shape() != self.values[k.0].shape() {
            return Err(dims_err("attention", self.values[q.0].shape(), self.values[k.0].shape()));
        }
        if batch == 0 || mq % batch != 0 || mk % batch != 0 || heads == 0 || width % heads != 0 {
            return Err(SarError::Dimension(format!(
                "attention: rows {mq}/{mk} not divisible into batch {batch}, or width {width} by heads {heads}"
            )));
        }
        let (lq, lk) = (mq / batch, mk / batch);
        if let Some(m) = mask {
            if m.rows() != lq || m.cols() != lk {
                return Err(SarError::Dimension(format!(
                    "attention: mask {}x{} for {lq}x{lk} scores",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let attn_mask = match mask {
            Some(mask) => AttnMask::Dense { mask, row_offset: 0 },
            None => AttnMask::Full,
        };
        let mut out = vec![0.0; mq * width];
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let (qd, kd, vd) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        for b in 0..batch {
            kernels::attention_forward(
                &qd[b * lq * width..(b + 1) * lq * width],
                &kd[b * lk * width..(b + 1) * lk * width],
                &vd[b * lk * width..(b + 1) * lk * width],
                lq,
                lk,
                width,
                heads,
                attn_mask,
                Some(&mut probs[b * heads * lq * lk..(b + 1) * heads * lq * lk]),
                &mut out[b * lq * width..(b + 1) * lq * width],
            )
            .map_err(|row| {
                SarError::Contract(format!("attention row {row} has no permitted key"))
            })?;
        }
        let t = Tensor::new(vec![mq, width], out)?;
        let r = self.req(&[q, k, v]);
        Ok(self.push(t, r, Op::Attention { q, k, v, batch, heads, probs }))
    }

    /// Row-wise softmax restricted to `mask`; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &BoolMatrix) -> Result<Var> {
        let (m, n) = self.values[x.0].dims2();
        if mask.rows() != m || mask.cols() != n {
            return Err(SarError::Dimension(format!(
                "masked_softmax: mask {}x{} for {m}x{n} scores",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let scores: Vec<f32> = self.values[x.0]
                .row(r)
                .iter()
                .enumerate()
                .map(|(c, &s)| if mask.get(r, c) { s } else { kernels::MASKED_SCORE })
                .collect();
            if !kernels::masked_softmax_row(&scores, |c| mask.get(r, c), &mut out[r * n..(r + 1) * n]) {
                return Err(SarError::Contract(format!("softmax row {r} is fully masked")));
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let r = self.req(&[x]);
        Ok(self.push(t, r, Op::MaskedSoftmax { x }))
    }

    /// Weighted mean of `-log softmax(logits)[target]` over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        let (m, vocab) = self.values[logits.0].dims2();
        if targets.len() != m || weights.len() != m {
            return Err(SarError::LengthMismatch { expected: m, actual: targets.len().min(weights.len()) });
        }
        let weight_sum: f32 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(SarError::Contract("cross entropy over an empty weighted set".into()));
        }
        let mut probs = vec![0.0; m * vocab];
        let mut loss = 0.0f64;
        for r in 0..m {
            let t = targets[r];
            if t >= vocab {
                return Err(SarError::OutOfRange { index: t, limit: vocab });
            }
            let row = self.values[logits.0].row(r);
            kernels::masked_softmax_row(row, |_| true, &mut probs[r * vocab..(r + 1) * vocab]);
            if weights[r] != 0.0 {
                loss += (weights[r] * row_nll(row, t)) as f64;
            }
        }
        let t = Tensor::new(vec![1], vec![(loss / weight_sum as f64) as f32])?;
        let r = self.req(&[logits]);
        Ok(self.push(
            t,
            r,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                weight_sum,
            },
        ))
    }

    /// Per-sequence concatenation: every part holds `batch * rows` rows and
    /// the output lists, for each sequence, the rows of part 0, part 1, ...
    pub fn concat_segments(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let width = self.values[parts[0].0 .0].dims2().1;
        let mut total = 0;
        for &(v, rows) in parts {
            let (m, w) = self.values[v.0].dims2();
            if w != width || m != rows * batch {
                return Err(SarError::Dimension(format!(
                    "concat: part with {m}x{w} rows, expected {}x{width}",
                    rows * batch
                )));
            }
            total += rows;
        }
        let mut data = Vec::with_capacity(batch * total * width);
        for b in 0..batch {
            for &(v, rows) in parts {
                let d = self.values[v.0].data();
                data.extend_from_slice(&d[b * rows * width..(b + 1) * rows * width]);
            }
        }
        let t = Tensor::new(vec![batch * total, width], data)?;
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let r = self.req(&vars);
        Ok(self.push(t, r, Op::ConcatSegments { parts: parts.to_vec(), batch }))
    }

    /// Sum of all entries (accumulated in f64) as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.values[a.0].data().iter().map(|&x| x as f64).sum();
        let t = Tensor::new(vec![1], vec![s as f32])?;
        let r = self.req(&[a]);
        Ok(self.push(t, r, Op::Sum(a)))
    }

    fn accumulate(&mut self, v: Var, g: &[f32]) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from a scalar node. Gradients of all upstream nodes
    /// that require grad are left in place for inspection.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(SarError::Dimension("backward needs a scalar".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backward_op(i, &op, &g);
            self.ops[i] = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.values[a.0].dims2();
                let n = self.values[b.0].dims2().1;
                if self.requires[a.0] {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_grad_a(g, self.values[b.0].data(), m, k, n, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.requires[b.0] {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_grad_b(self.values[a.0].data(), g, m, k, n, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(*a, g);
                if self.requires[bias.0] {
                    let n = self.values[bias.0].len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.requires[a.0] {
                    let da: Vec<f32> = g.iter().zip(self.values[b.0].data()).map(|(x, y)| x * y).collect();
                    self.accumulate(*a, &da);
                }
                if self.requires[b.0] {
                    let db: Vec<f32> = g.iter().zip(self.values[a.0].data()).map(|(x, y)| x * y).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Silu(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gy, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gy * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Embedding { table, ids } => {
                if self.requires[table.0] {
                    let (vocab, d) = self.values[table.0].dims2();
                    let mut dt = vec![0.0; vocab * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, x) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *t += x;
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, d) = self.values[x.0].dims2();
                let xd = self.values[x.0].data();
                let gd = self.values[gain.0].data();
                let mut dx = vec![0.0; m * d];
                let mut dg = vec![0.0; d];
                for r in 0..m {
                    let inv = inv_rms[r];
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut proj = 0.0f32;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dg[j] += gr[j] * xhat;
                        proj += gr[j] * gd[j] * xhat;
                    }
                    proj /= d as f32;
                    for j in 0..d {
                        dx[r * d + j] = inv * (gr[j] * gd[j] - xr[j] * inv * proj);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dg);
            }
            Op::Rope { x, table, head_dim, rows_per_seq } => {
                let width = self.values[x.0].dims2().1;
                let mut dx = g.to_vec();
                let rps = *rows_per_seq;
                kernels::rope_rows(&mut dx, width, *head_dim, &table.cos, &table.sin, |r| r % rps, true);
                self.accumulate(*x, &dx);
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                let (mq, width) = self.values[q.0].dims2();
                let mk = self.values[k.0].dims2().0;
                let (lq, lk) = (mq / batch, mk / batch);
                let mut dq = vec![0.0; mq * width];
                let mut dk = vec![0.0; mk * width];
                let mut dv = vec![0.0; mk * width];
                let (qd, kd, vd) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
                for b in 0..*batch {
                    let (qs, ks) = (b * lq * width..(b + 1) * lq * width, b * lk * width..(b + 1) * lk * width);
                    kernels::attention_backward(
                        &qd[qs.clone()],
                        &kd[ks.clone()],
                        &vd[ks.clone()],
                        &probs[b * heads * lq * lk..(b + 1) * heads * lq * lk],
                        &g[qs.clone()],
                        lq,
                        lk,
                        width,
                        *heads,
                        &mut dq[qs],
                        &mut dk[ks.clone()],
                        &mut dv[ks],
                    );
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
                self.accumulate(*v, &dv);
            }
            Op::MaskedSoftmax { x } => {
                let (m, n) = self.values[i].dims2();
                let p = self.values[i].data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let pr = &p[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = kernels::dot(pr, gr);
                    for c in 0..n {
                        dx[r * n + c] = pr[c] * (gr[c] - s);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropy { logits, probs, targets, weights, weight_sum } => {
                let (m, vocab) = self.values[logits.0].dims2();
                let mut dl = vec![0.0; m * vocab];
                for r in 0..m {
                    if weights[r] == 0.0 {
                        continue;
                    }
                    let scale = g[0] * weights[r] / weight_sum;
                    for c in 0..vocab {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        dl[r * vocab + c] = scale * (probs[r * vocab + c] - onehot);
                    }
                }
                self.accumulate(*logits, &dl);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.values[a.0].len()];
                self.accumulate(*a, &da);
            }
            Op::ConcatSegments { parts, batch } => {
                let width = self.values[i].dims2().1;
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, rows) in parts {
                    if self.requires[v.0] {
                        let mut dv = Vec::with_capacity(batch * rows * width);
                        for b in 0..*batch {
                            let start = (b * total + offset) * width;
                            dv.extend_from_slice(&g[start..start + rows * width]);
                        }
                        self.accumulate(v, &dv);
                    }
                    offset += rows;
                }
            }
        }
    }
}

/// `-log softmax(row)[target]`, computed with a max shift.
pub fn row_nll(row: &[f32], target: usize) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f32>().ln() + max;
    lse - row[target]
}
