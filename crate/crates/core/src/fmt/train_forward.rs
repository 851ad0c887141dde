use std::sync::Arc;

use crate::error::{Result, SarError};
use crate::masks::{BoolMatrix, GeneralizedCausalMasks};
use crate::numerics::{Graph, RopeTable, Tensor, Var};
use crate::schedule::SetPlan;

use super::{AttnWeights, FfnWeights, Fmt, PosEmbedKind, Weights};

/// A recorded teacher-forced forward pass over a batch that shares one plan.
pub struct TrainForward {
    pub graph: Graph,
    pub weights: Weights<Var>,
    /// `[batch * N, vocab]`, row `b * N + t` predicts ordered token `t` of sample `b`.
    pub logits: Var,
    /// Looked-up embeddings of the seen tokens, `[batch * (L_e - 1), width]`,
    /// before positions are added.
    pub token_embeddings: Var,
    pub batch: usize,
}

struct Layout<'a> {
    batch: usize,
    heads: usize,
    head_dim: usize,
    rope_q: &'a Arc<RopeTable>,
    rope_k: &'a Arc<RopeTable>,
    lq: usize,
    lk: usize,
}

fn attention_block(
    g: &mut Graph,
    queries: Var,
    keys_src: Var,
    w: &AttnWeights<Var>,
    layout: &Layout<'_>,
    mask: &BoolMatrix,
) -> Result<Var> {
    let q = g.matmul(queries, w.wq)?;
    let k = g.matmul(keys_src, w.wk)?;
    let v = g.matmul(keys_src, w.wv)?;
    let q = g.rope(q, layout.rope_q.clone(), layout.head_dim, layout.lq)?;
    let k = g.rope(k, layout.rope_k.clone(), layout.head_dim, layout.lk)?;
    let a = g.attention(q, k, v, layout.batch, layout.heads, Some(mask))?;
    g.matmul(a, w.wo)
}

fn ffn_block(g: &mut Graph, x: Var, w: &FfnWeights<Var>) -> Result<Var> {
    let gate = g.matmul(x, w.gate)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(x, w.up)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, w.down)
}

fn position_rows(g: &mut Graph, model: &Fmt, w: &Weights<Var>, positions: &[usize], batch: usize) -> Result<Var> {
    let ids: Vec<usize> = (0..batch).flat_map(|_| positions.iter().copied()).collect();
    match (model.config.pos_embed, w.pos_table) {
        (PosEmbedKind::Learned, Some(table)) => g.embedding(table, &ids),
        (PosEmbedKind::Sine, _) => {
            let d = model.config.width;
            let data = ids.iter().flat_map(|&p| model.positions.sine(p).iter().copied()).collect();
            Ok(g.leaf(Tensor::new(vec![ids.len(), d], data)?, false))
        }
        (PosEmbedKind::Learned, None) => Err(SarError::Config("learned positions without a table".into())),
    }
}

/// Teacher-forced pass over a batch.
///
/// `seen[b]` holds the first `N - n_K` tokens of sample `b` in causal order
/// (the last set is never an input); `classes[b]` is its condition id.
pub fn forward_train(
    model: &Fmt,
    seen: &[Vec<usize>],
    classes: &[usize],
    plan: &SetPlan,
    masks: &GeneralizedCausalMasks,
    requires_grad: bool,
) -> Result<TrainForward> {
    let cfg = &model.config;
    let n = cfg.seq_len();
    let batch = classes.len();
    if batch == 0 || seen.len() != batch {
        return Err(SarError::LengthMismatch { expected: batch, actual: seen.len() });
    }
    if plan.len() != n {
        return Err(SarError::LengthMismatch { expected: n, actual: plan.len() });
    }
    let enc_tokens = n - plan.intervals.last();
    if masks.encoder_len() != enc_tokens + 1 || masks.decoder_len() != n {
        return Err(SarError::Dimension(format!(
            "masks are {}x{} for a plan needing {}x{}",
            masks.encoder_len(),
            masks.decoder_len(),
            enc_tokens + 1,
            n
        )));
    }
    for (s, &c) in seen.iter().zip(classes) {
        if s.len() != enc_tokens {
            return Err(SarError::LengthMismatch { expected: enc_tokens, actual: s.len() });
        }
        if c > cfg.num_classes {
            return Err(SarError::OutOfRange { index: c, limit: cfg.num_classes + 1 });
        }
    }

    let mut g = Graph::new();
    let w = model.params.map(|_, t| g.leaf(t.clone(), requires_grad));

    let perm = plan.order.perm();
    let mut enc_positions = Vec::with_capacity(enc_tokens + 1);
    enc_positions.push(model.positions.null_slot());
    enc_positions.extend_from_slice(&perm[..enc_tokens]);
    let dec_positions = &perm[..n];
    let rope_enc = Arc::new(model.positions.rope_table(&enc_positions));
    let rope_dec = Arc::new(model.positions.rope_table(dec_positions));

    let cls = g.embedding(w.cls_emb, classes)?;
    let flat: Vec<usize> = seen.iter().flatten().copied().collect();
    let token_embeddings = g.embedding(w.tok_emb, &flat)?;
    let x = g.concat_segments(&[(cls, 1), (token_embeddings, enc_tokens)], batch)?;
    let pos = position_rows(&mut g, model, &w, &enc_positions, batch)?;
    let mut x = g.add(x, pos)?;

    let enc_layout = Layout {
        batch,
        heads: cfg.heads,
        head_dim: cfg.head_dim(),
        rope_q: &rope_enc,
        rope_k: &rope_enc,
        lq: enc_tokens + 1,
        lk: enc_tokens + 1,
    };
    for layer in &w.encoder {
        let h = g.rmsnorm(x, layer.attn_norm)?;
        let a = attention_block(&mut g, h, h, &layer.attn, &enc_layout, &masks.encoder)?;
        x = g.add(x, a)?;
        let h = g.rmsnorm(x, layer.ffn_norm)?;
        let f = ffn_block(&mut g, h, &layer.ffn)?;
        x = g.add(x, f)?;
    }
    let enc_out = g.rmsnorm(x, w.enc_norm)?;

    let mut y = position_rows(&mut g, model, &w, dec_positions, batch)?;
    let self_layout = Layout {
        rope_q: &rope_dec,
        rope_k: &rope_dec,
        lq: n,
        lk: n,
        ..enc_layout
    };
    let cross_layout = Layout {
        rope_q: &rope_dec,
        rope_k: &rope_enc,
        lq: n,
        lk: enc_tokens + 1,
        ..enc_layout
    };
    for layer in &w.decoder {
        let h = g.rmsnorm(y, layer.self_norm)?;
        let a = attention_block(&mut g, h, h, &layer.self_attn, &self_layout, &masks.decoder_self)?;
        y = g.add(y, a)?;
        let h = g.rmsnorm(y, layer.cross_norm)?;
        let a = attention_block(&mut g, h, enc_out, &layer.cross_attn, &cross_layout, &masks.decoder_cross)?;
        y = g.add(y, a)?;
        let h = g.rmsnorm(y, layer.ffn_norm)?;
        let f = ffn_block(&mut g, h, &layer.ffn)?;
        y = g.add(y, f)?;
    }
    let y = g.rmsnorm(y, w.final_norm)?;
    let logits = g.matmul(y, w.head)?;
    let logits = g.add_bias(logits, w.head_bias)?;
    Ok(TrainForward {
        graph: g,
        weights: w,
        logits,
        token_embeddings,
        batch,
    })
}
