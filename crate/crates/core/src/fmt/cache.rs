//! Tape-free inference: full recomputation under dense masks, and set-wise
//! incremental decoding with a key/value cache.

use serde::Serialize;

use crate::error::{Result, SarError};
use crate::masks::GeneralizedCausalMasks;
use crate::numerics::kernels::{self, AttnMask};
use crate::numerics::Tensor;
use crate::schedule::SetPlan;

use super::{AttnWeights, FfnWeights, Fmt, PosEmbedKind};

/// Query-key inner products evaluated per attention site.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AttnOpCount {
    pub encoder_self: u64,
    pub decoder_self: u64,
    pub decoder_cross: u64,
}

impl AttnOpCount {
    pub fn total(&self) -> u64 {
        self.encoder_self + self.decoder_self + self.decoder_cross
    }

    pub fn add(&mut self, other: &AttnOpCount) {
        self.encoder_self += other.encoder_self;
        self.decoder_self += other.decoder_self;
        self.decoder_cross += other.decoder_cross;
    }
}

/// Keys (after RoPE) and values of one attention site, `rows x width`.
#[derive(Debug, Clone, Default)]
struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

impl LayerKv {
    fn append(&mut self, k: &[f32], v: &[f32]) {
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
    }
}

/// Accumulated keys and values of one generation stream.
///
/// After `committed_sets() == k` steps the encoder side holds the condition
/// plus sets `1..k-1` and the decoder side holds the query rows of sets `1..k`.
#[derive(Debug, Clone)]
pub struct KvCache {
    width: usize,
    enc: Vec<LayerKv>,
    dec_self: Vec<LayerKv>,
    dec_cross: Vec<LayerKv>,
    enc_len: usize,
    dec_len: usize,
    committed: usize,
}

impl KvCache {
    pub fn new(model: &Fmt) -> Self {
        let c = &model.config;
        Self {
            width: c.width,
            enc: vec![LayerKv::default(); c.enc_layers],
            dec_self: vec![LayerKv::default(); c.dec_layers],
            dec_cross: vec![LayerKv::default(); c.dec_layers],
            enc_len: 0,
            dec_len: 0,
            committed: 0,
        }
    }

    pub fn encoder_len(&self) -> usize {
        self.enc_len
    }

    pub fn decoder_len(&self) -> usize {
        self.dec_len
    }

    pub fn committed_sets(&self) -> usize {
        self.committed
    }

    /// Rows stored per layer, checked against the tracked lengths.
    pub fn is_consistent(&self) -> bool {
        let w = self.width;
        self.enc.iter().all(|l| l.k.len() == self.enc_len * w && l.v.len() == self.enc_len * w)
            && self.dec_cross.iter().all(|l| l.k.len() == self.enc_len * w && l.v.len() == self.enc_len * w)
            && self.dec_self.iter().all(|l| l.k.len() == self.dec_len * w && l.v.len() == self.dec_len * w)
    }
}

/// New material for the encoder stream at one decoding step.
#[derive(Debug, Clone, Copy)]
pub enum SeenInput<'a> {
    /// First step: the condition token.
    Class(usize),
    /// Later steps: tokens sampled for the previous set and their grid positions.
    Tokens { tokens: &'a [usize], positions: &'a [usize] },
}

fn linear(x: &[f32], rows: usize, w: &Tensor) -> Vec<f32> {
    let (k, n) = w.dims2();
    let mut out = vec![0.0; rows * n];
    kernels::matmul(x, w.data(), rows, k, n, &mut out);
    out
}

fn rmsnorm(x: &[f32], rows: usize, gain: &Tensor) -> Vec<f32> {
    let d = gain.len();
    let mut out = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    kernels::rmsnorm(x, gain.data(), d, &mut out, &mut inv);
    out
}

fn add_into(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn rope(model: &Fmt, x: &mut [f32], positions: &[usize]) {
    let cfg = &model.config;
    let table = model.positions.rope_table(positions);
    kernels::rope_rows(x, cfg.width, cfg.head_dim(), &table.cos, &table.sin, |r| r, false);
}

fn ffn(x: &[f32], rows: usize, w: &FfnWeights<Tensor>) -> Vec<f32> {
    let mut gate = linear(x, rows, &w.gate);
    for v in gate.iter_mut() {
        *v = kernels::silu(*v);
    }
    let up = linear(x, rows, &w.up);
    for (a, b) in gate.iter_mut().zip(&up) {
        *a *= b;
    }
    linear(&gate, rows, &w.down)
}

fn position_rows(model: &Fmt, positions: &[usize]) -> Vec<f32> {
    let d = model.config.width;
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        match (model.config.pos_embed, &model.params.pos_table) {
            (PosEmbedKind::Learned, Some(t)) => out.extend_from_slice(t.row(p)),
            _ => out.extend_from_slice(model.positions.sine(p)),
        }
    }
    out
}

/// Attention of `rows` query rows against the projected keys/values in `kv`.
#[allow(clippy::too_many_arguments)]
fn attend(
    model: &Fmt,
    h: &[f32],
    rows: usize,
    q_positions: &[usize],
    w: &AttnWeights<Tensor>,
    kv: &LayerKv,
    mask: AttnMask<'_>,
    counter: &mut u64,
) -> Result<Vec<f32>> {
    let cfg = &model.config;
    let mut q = linear(h, rows, &w.wq);
    rope(model, &mut q, q_positions);
    let lk = kv.k.len() / cfg.width;
    let mut out = vec![0.0; rows * cfg.width];
    let count = kernels::attention_forward(&q, &kv.k, &kv.v, rows, lk, cfg.width, cfg.heads, mask, None, &mut out)
        .map_err(|r| SarError::Contract(format!("attention row {r} has no permitted key")))?;
    *counter += count;
    Ok(linear(&out, rows, &w.wo))
}

/// Keys (with RoPE) and values of `src` under projection `w`.
fn project_kv(model: &Fmt, src: &[f32], rows: usize, positions: &[usize], w: &AttnWeights<Tensor>) -> LayerKv {
    let mut k = linear(src, rows, &w.wk);
    rope(model, &mut k, positions);
    LayerKv { k, v: linear(src, rows, &w.wv) }
}

/// Encoder layers over `x`. With `cache`, new keys/values are appended and
/// the queries attend to everything cached; otherwise `mask` applies.
fn encoder_pass(
    model: &Fmt,
    mut x: Vec<f32>,
    positions: &[usize],
    mask: AttnMask<'_>,
    mut cache: Option<&mut [LayerKv]>,
    counter: &mut AttnOpCount,
) -> Result<Vec<f32>> {
    let rows = positions.len();
    for (l, layer) in model.params.encoder.iter().enumerate() {
        let h = rmsnorm(&x, rows, &layer.attn_norm);
        let fresh = project_kv(model, &h, rows, positions, &layer.attn);
        let a = match cache.as_deref_mut() {
            Some(c) => {
                c[l].append(&fresh.k, &fresh.v);
                attend(model, &h, rows, positions, &layer.attn, &c[l], AttnMask::Full, &mut counter.encoder_self)?
            }
            None => attend(model, &h, rows, positions, &layer.attn, &fresh, mask, &mut counter.encoder_self)?,
        };
        add_into(&mut x, &a);
        let h = rmsnorm(&x, rows, &layer.ffn_norm);
        add_into(&mut x, &ffn(&h, rows, &layer.ffn));
    }
    Ok(rmsnorm(&x, rows, &model.params.enc_norm))
}

/// Decoder layers over the query rows at `positions`, returning logits.
#[allow(clippy::too_many_arguments)]
fn decoder_pass(
    model: &Fmt,
    positions: &[usize],
    self_mask: AttnMask<'_>,
    cross_mask: AttnMask<'_>,
    cross_kv: &[LayerKv],
    mut self_cache: Option<&mut [LayerKv]>,
    counter: &mut AttnOpCount,
) -> Result<Vec<f32>> {
    let rows = positions.len();
    let mut y = position_rows(model, positions);
    for (l, layer) in model.params.decoder.iter().enumerate() {
        let h = rmsnorm(&y, rows, &layer.self_norm);
        let fresh = project_kv(model, &h, rows, positions, &layer.self_attn);
        let a = match self_cache.as_deref_mut() {
            Some(c) => {
                c[l].append(&fresh.k, &fresh.v);
                attend(model, &h, rows, positions, &layer.self_attn, &c[l], AttnMask::Full, &mut counter.decoder_self)?
            }
            None => attend(model, &h, rows, positions, &layer.self_attn, &fresh, self_mask, &mut counter.decoder_self)?,
        };
        add_into(&mut y, &a);
        let h = rmsnorm(&y, rows, &layer.cross_norm);
        let a = attend(model, &h, rows, positions, &layer.cross_attn, &cross_kv[l], cross_mask, &mut counter.decoder_cross)?;
        add_into(&mut y, &a);
        let h = rmsnorm(&y, rows, &layer.ffn_norm);
        add_into(&mut y, &ffn(&h, rows, &layer.ffn));
    }
    let y = rmsnorm(&y, rows, &model.params.final_norm);
    let mut logits = linear(&y, rows, &model.params.head);
    let vocab = model.config.vocab;
    for row in logits.chunks_exact_mut(vocab) {
        add_into(row, model.params.head_bias.data());
    }
    Ok(logits)
}

fn encoder_inputs(model: &Fmt, class: usize, tokens: &[usize], positions: &[usize]) -> Result<Vec<f32>> {
    let cfg = &model.config;
    if class > cfg.num_classes {
        return Err(SarError::OutOfRange { index: class, limit: cfg.num_classes + 1 });
    }
    let mut x = Vec::with_capacity((tokens.len() + 1) * cfg.width);
    x.extend_from_slice(model.params.cls_emb.row(class));
    encoder_token_rows(model, tokens, &mut x)?;
    let pos = position_rows(model, positions);
    add_into(&mut x, &pos);
    Ok(x)
}

fn encoder_token_rows(model: &Fmt, tokens: &[usize], x: &mut Vec<f32>) -> Result<()> {
    for &t in tokens {
        if t >= model.config.vocab {
            return Err(SarError::OutOfRange { index: t, limit: model.config.vocab });
        }
        x.extend_from_slice(model.params.tok_emb.row(t));
    }
    Ok(())
}

/// One incremental decoding step: feeds `new_seen` to the encoder stream,
/// then runs the decoder for `query_positions` (the next set's grid
/// positions) against the cache. Returns `[n_k, vocab]` logits.
pub fn forward_step(
    model: &Fmt,
    cache: &mut KvCache,
    new_seen: SeenInput<'_>,
    query_positions: &[usize],
    counter: &mut AttnOpCount,
) -> Result<Vec<f32>> {
    if !cache.is_consistent() {
        return Err(SarError::Contract("cache buffers out of sync".into()));
    }
    let (x, enc_positions): (Vec<f32>, Vec<usize>) = match new_seen {
        SeenInput::Class(c) => {
            if cache.committed != 0 {
                return Err(SarError::Contract("condition fed to a non-empty cache".into()));
            }
            let null = model.positions.null_slot();
            (encoder_inputs(model, c, &[], &[null])?, vec![null])
        }
        SeenInput::Tokens { tokens, positions } => {
            if cache.committed == 0 {
                return Err(SarError::Contract("the first step must feed the condition".into()));
            }
            if tokens.len() != positions.len() {
                return Err(SarError::LengthMismatch { expected: positions.len(), actual: tokens.len() });
            }
            let mut x = Vec::with_capacity(tokens.len() * model.config.width);
            encoder_token_rows(model, tokens, &mut x)?;
            add_into(&mut x, &position_rows(model, positions));
            (x, positions.to_vec())
        }
    };
    let rows = enc_positions.len();
    let enc_out = encoder_pass(model, x, &enc_positions, AttnMask::Full, Some(&mut cache.enc), counter)?;
    for (l, layer) in model.params.decoder.iter().enumerate() {
        let kv = project_kv(model, &enc_out, rows, &enc_positions, &layer.cross_attn);
        cache.dec_cross[l].append(&kv.k, &kv.v);
    }
    cache.enc_len += rows;
    let logits = decoder_pass(
        model,
        query_positions,
        AttnMask::Full,
        AttnMask::Full,
        &cache.dec_cross,
        Some(&mut cache.dec_self),
        counter,
    )?;
    cache.dec_len += query_positions.len();
    cache.committed += 1;
    Ok(logits)
}

fn check_plan(model: &Fmt, plan: &SetPlan, masks: &GeneralizedCausalMasks) -> Result<()> {
    let n = model.config.seq_len();
    if plan.len() != n {
        return Err(SarError::LengthMismatch { expected: n, actual: plan.len() });
    }
    if masks.decoder_len() != n || masks.encoder_len() != 1 + n - plan.intervals.last() {
        return Err(SarError::Dimension("masks do not match the plan".into()));
    }
    Ok(())
}

/// Full recomputation for 0-based set `k`: encodes the condition plus the
/// first `offset_k` causal tokens and decodes every query row up to the end
/// of set `k` under the dense masks. Returns the `[n_k, vocab]` logits of set `k`.
pub fn forward_prefix(
    model: &Fmt,
    class: usize,
    causal_tokens: &[usize],
    plan: &SetPlan,
    masks: &GeneralizedCausalMasks,
    k: usize,
    counter: &mut AttnOpCount,
) -> Result<Vec<f32>> {
    check_plan(model, plan, masks)?;
    let range = plan.intervals.range(k);
    if causal_tokens.len() < range.start {
        return Err(SarError::LengthMismatch { expected: range.start, actual: causal_tokens.len() });
    }
    let logits = run_full(model, class, &causal_tokens[..range.start], plan, masks, range.end, counter)?;
    let vocab = model.config.vocab;
    Ok(logits[range.start * vocab..].to_vec())
}

/// Teacher-forced logits for all `N` ordered rows (`[N, vocab]`).
pub fn teacher_forced_logits(
    model: &Fmt,
    class: usize,
    causal_tokens: &[usize],
    plan: &SetPlan,
    masks: &GeneralizedCausalMasks,
) -> Result<Vec<f32>> {
    check_plan(model, plan, masks)?;
    let n = model.config.seq_len();
    if causal_tokens.len() != n {
        return Err(SarError::LengthMismatch { expected: n, actual: causal_tokens.len() });
    }
    let seen = n - plan.intervals.last();
    run_full(model, class, &causal_tokens[..seen], plan, masks, n, &mut AttnOpCount::default())
}

fn run_full(
    model: &Fmt,
    class: usize,
    seen: &[usize],
    plan: &SetPlan,
    masks: &GeneralizedCausalMasks,
    dec_rows: usize,
    counter: &mut AttnOpCount,
) -> Result<Vec<f32>> {
    let perm = plan.order.perm();
    let mut enc_positions = vec![model.positions.null_slot()];
    enc_positions.extend_from_slice(&perm[..seen.len()]);
    let x = encoder_inputs(model, class, seen, &enc_positions)?;
    let enc_mask = AttnMask::Dense { mask: &masks.encoder, row_offset: 0 };
    let enc_out = encoder_pass(model, x, &enc_positions, enc_mask, None, counter)?;
    let rows = enc_positions.len();
    let cross_kv: Vec<LayerKv> = model
        .params
        .decoder
        .iter()
        .map(|layer| project_kv(model, &enc_out, rows, &enc_positions, &layer.cross_attn))
        .collect();
    decoder_pass(
        model,
        &perm[..dec_rows],
        AttnMask::Dense { mask: &masks.decoder_self, row_offset: 0 },
        AttnMask::Dense { mask: &masks.decoder_cross, row_offset: 0 },
        &cross_kv,
        None,
        counter,
    )
}
