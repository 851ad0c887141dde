//! Plain fp32 loops shared by the autograd graph and the tape-free
//! inference path. Every kernel computes each output row independently of
//! the other rows, with a fixed accumulation order, so a row's value does not
//! depend on how many rows are processed together.

use crate::masks::BoolMatrix;

/// Value used in place of minus infinity for masked scores.
pub const MASKED_SCORE: f32 = -1e9;

pub const RMS_EPS: f32 = 1e-5;

/// `out[m, n] = a[m, k] . b[k, n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `da[m, k] += dc[m, n] . b[k, n]^T`
pub fn matmul_grad_a(dc: &[f32], b: &[f32], m: usize, k: usize, n: usize, da: &mut [f32]) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(dc_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k, n] += a[m, k]^T . dc[m, n]`
pub fn matmul_grad_b(a: &[f32], dc: &[f32], m: usize, k: usize, n: usize, db: &mut [f32]) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &g) in db_row.iter_mut().zip(dc_row) {
                *d += av * g;
            }
        }
    }
}

/// Eight interleaved partial sums (vectorizes), reduced in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Row-wise RMS normalisation with gain. Writes `1/rms` per row to `inv_rms`.
pub fn rmsnorm(x: &[f32], gain: &[f32], d: usize, out: &mut [f32], inv_rms: &mut [f32]) {
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms = xr.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms[r] = inv;
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = v * inv * g;
        }
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotates consecutive pairs `(x[2j], x[2j+1])` of every head by the
/// per-row angles given as `cos`/`sin` tables of width `head_dim / 2`.
/// `table_row(r)` picks the table row for data row `r`; `inverse` applies the
/// transpose rotation (used by the backward pass).
pub fn rope_rows(
    x: &mut [f32],
    width: usize,
    head_dim: usize,
    cos: &[f32],
    sin: &[f32],
    table_row: impl Fn(usize) -> usize,
    inverse: bool,
) {
    let half = head_dim / 2;
    for (r, row) in x.chunks_exact_mut(width).enumerate() {
        let t = table_row(r) * half;
        let (c_row, s_row) = (&cos[t..t + half], &sin[t..t + half]);
        for head in row.chunks_exact_mut(head_dim) {
            for j in 0..half {
                let (c, s) = (c_row[j], if inverse { -s_row[j] } else { s_row[j] });
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * c - b * s;
                head[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

/// Softmax over the permitted entries of one row. Masked entries come out as
/// exactly zero. Returns `false` if no entry is permitted.
pub fn masked_softmax_row(scores: &[f32], permitted: impl Fn(usize) -> bool, out: &mut [f32]) -> bool {
    let mut max = f32::NEG_INFINITY;
    let mut any = false;
    for (c, &s) in scores.iter().enumerate() {
        if permitted(c) {
            any = true;
            if s > max {
                max = s;
            }
        }
    }
    if !any {
        out.fill(0.0);
        return false;
    }
    let mut sum = 0.0f32;
    for (c, (o, &s)) in out.iter_mut().zip(scores).enumerate() {
        if permitted(c) {
            let e = (s - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

/// Which (query, key) pairs of an attention call are permitted.
#[derive(Clone, Copy)]
pub enum AttnMask<'a> {
    /// Every key is visible to every query.
    Full,
    /// A window of a dense mask: query `r` uses mask row `row_offset + r`,
    /// key `c` uses mask column `c` (columns beyond the mask are forbidden).
    Dense {
        mask: &'a BoolMatrix,
        row_offset: usize,
    },
}

impl AttnMask<'_> {
    #[inline]
    pub fn permitted(&self, r: usize, c: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Dense { mask, row_offset } => c < mask.cols() && mask.get(row_offset + r, c),
        }
    }
}

/// Multi-head scaled dot-product attention for one sequence.
///
/// `q` is `[lq, width]`, `k`/`v` are `[lk, width]`; heads are contiguous
/// column blocks. Writes `[lq, width]` to `out` and, if given, the attention
/// weights `[heads, lq, lk]` to `probs`. Returns the number of query-key
/// inner products evaluated (masked pairs are skipped).
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    lq: usize,
    lk: usize,
    width: usize,
    heads: usize,
    mask: AttnMask<'_>,
    mut probs: Option<&mut [f32]>,
    out: &mut [f32],
) -> Result<u64, usize> {
    let hd = width / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut scores = vec![0.0f32; lk];
    let mut weights = vec![0.0f32; lk];
    let mut count = 0u64;
    out.fill(0.0);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for r in 0..lq {
            let qr = &q[r * width + cols.start..r * width + cols.end];
            for c in 0..lk {
                if mask.permitted(r, c) {
                    scores[c] = dot(qr, &k[c * width + cols.start..c * width + cols.end]) * scale;
                    count += 1;
                } else {
                    scores[c] = MASKED_SCORE;
                }
            }
            if !masked_softmax_row(&scores, |c| mask.permitted(r, c), &mut weights) {
                return Err(r);
            }
            let o = &mut out[r * width + cols.start..r * width + cols.end];
            for (c, &p) in weights.iter().enumerate() {
                if p != 0.0 {
                    let vr = &v[c * width + cols.start..c * width + cols.end];
                    for (ov, &vv) in o.iter_mut().zip(vr) {
                        *ov += p * vv;
                    }
                }
            }
            if let Some(pr) = probs.as_deref_mut() {
                pr[(h * lq + r) * lk..(h * lq + r + 1) * lk].copy_from_slice(&weights);
            }
        }
    }
    Ok(count)
}

/// Backward of [`attention_forward`], accumulating into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    lq: usize,
    lk: usize,
    width: usize,
    heads: usize,
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dp = vec![0.0f32; lk];
    for h in 0..heads {
        let c0 = h * hd;
        for r in 0..lq {
            let p = &probs[(h * lq + r) * lk..(h * lq + r + 1) * lk];
            let dor = &dout[r * width + c0..r * width + c0 + hd];
            let mut acc = 0.0f32;
            for c in 0..lk {
                if p[c] != 0.0 {
                    dp[c] = dot(dor, &v[c * width + c0..c * width + c0 + hd]);
                    acc += p[c] * dp[c];
                } else {
                    dp[c] = 0.0;
                }
            }
            for c in 0..lk {
                if p[c] == 0.0 {
                    continue;
                }
                let ds = p[c] * (dp[c] - acc) * scale;
                let kr = c * width + c0;
                let qr = r * width + c0;
                for d in 0..hd {
                    dq[qr + d] += ds * k[kr + d];
                    dk[kr + d] += ds * q[qr + d];
                    dv[kr + d] += p[c] * dor[d];
                }
            }
        }
    }
}
