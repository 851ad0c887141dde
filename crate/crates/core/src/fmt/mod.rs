//! Fully Masked Transformer: an encoder over the seen tokens, a decoder whose
//! inputs are purely positional queries, and generalized causal masks at all
//! three attention sites.

mod cache;
mod positions;
mod train_forward;

pub use cache::{forward_prefix, forward_step, teacher_forced_logits, AttnOpCount, KvCache, SeenInput};
pub use positions::PositionTables;
pub use train_forward::{forward_train, TrainForward};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use crate::numerics::Tensor;
use crate::schedule::GridShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedKind {
    Learned,
    Sine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmtConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Real classes; id `num_classes` is the null class used for guidance.
    pub num_classes: usize,
    pub grid: GridShape,
    pub pos_embed: PosEmbedKind,
    pub rope_base: f32,
}

impl FmtConfig {
    /// The desk-scale model: 2 encoder + 2 decoder layers, width 64, 4 heads.
    pub fn tiny(grid: GridShape, vocab: usize, num_classes: usize) -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            width: 64,
            heads: 4,
            vocab,
            num_classes,
            grid,
            pos_embed: PosEmbedKind::Sine,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SarError::Config(msg));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("layer counts must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !self.head_dim().is_multiple_of(4) {
            return bad(format!("head dim {} must be a multiple of 4 for 2-D RoPE", self.head_dim()));
        }
        if !self.width.is_multiple_of(4) {
            return bad(format!("width {} must be a multiple of 4 for sine embeddings", self.width));
        }
        if self.vocab == 0 || self.num_classes == 0 {
            return bad("vocab and num_classes must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// SwiGLU hidden width: 8/3 of the model width, nearest multiple of 8.
    pub fn ffn_hidden(&self) -> usize {
        let raw = 8 * self.width / 3;
        ((raw + 4) / 8 * 8).max(8)
    }

    pub fn seq_len(&self) -> usize {
        self.grid.len()
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<T> {
    pub gate: T,
    pub up: T,
    pub down: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: T,
    pub attn: AttnWeights<T>,
    pub ffn_norm: T,
    pub ffn: FfnWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: T,
    pub self_attn: AttnWeights<T>,
    pub cross_norm: T,
    pub cross_attn: AttnWeights<T>,
    pub ffn_norm: T,
    pub ffn: FfnWeights<T>,
}

/// Every learnable tensor of the model, generic over the storage so the same
/// layout serves both owned tensors and graph variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub tok_emb: T,
    pub cls_emb: T,
    /// `(N + 1) x width`; row `N` is the condition slot. Learned embeddings only.
    pub pos_table: Option<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub enc_norm: T,
    pub decoder: Vec<DecoderLayer<T>>,
    pub final_norm: T,
    pub head: T,
    pub head_bias: T,
}

impl<T> AttnWeights<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> AttnWeights<U> {
        AttnWeights {
            wq: f(&format!("{p}.wq"), &self.wq),
            wk: f(&format!("{p}.wk"), &self.wk),
            wv: f(&format!("{p}.wv"), &self.wv),
            wo: f(&format!("{p}.wo"), &self.wo),
        }
    }
}

impl<T> FfnWeights<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> FfnWeights<U> {
        FfnWeights {
            gate: f(&format!("{p}.gate"), &self.gate),
            up: f(&format!("{p}.up"), &self.up),
            down: f(&format!("{p}.down"), &self.down),
        }
    }
}

impl<T> Weights<T> {
    /// Builds a structurally identical set of weights, calling `f` with the
    /// canonical name of every tensor in a fixed order.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Weights<U> {
        let f = &mut f;
        let tok_emb = f("tok_emb", &self.tok_emb);
        let cls_emb = f("cls_emb", &self.cls_emb);
        let pos_table = self.pos_table.as_ref().map(|t| f("pos_table", t));
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("enc.{i}");
                EncoderLayer {
                    attn_norm: f(&format!("{p}.attn_norm"), &l.attn_norm),
                    attn: l.attn.map(&format!("{p}.attn"), f),
                    ffn_norm: f(&format!("{p}.ffn_norm"), &l.ffn_norm),
                    ffn: l.ffn.map(&format!("{p}.ffn"), f),
                }
            })
            .collect();
        let enc_norm = f("enc_norm", &self.enc_norm);
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("dec.{i}");
                DecoderLayer {
                    self_norm: f(&format!("{p}.self_norm"), &l.self_norm),
                    self_attn: l.self_attn.map(&format!("{p}.self_attn"), f),
                    cross_norm: f(&format!("{p}.cross_norm"), &l.cross_norm),
                    cross_attn: l.cross_attn.map(&format!("{p}.cross_attn"), f),
                    ffn_norm: f(&format!("{p}.ffn_norm"), &l.ffn_norm),
                    ffn: l.ffn.map(&format!("{p}.ffn"), f),
                }
            })
            .collect();
        Weights {
            tok_emb,
            cls_emb,
            pos_table,
            encoder,
            enc_norm,
            decoder,
            final_norm: f("final_norm", &self.final_norm),
            head: f("head", &self.head),
            head_bias: f("head_bias", &self.head_bias),
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|name, t| out.push((name.to_string(), t)));
        out
    }
}

impl<T> AttnWeights<T> {
    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]);
    }
}

impl<T> FfnWeights<T> {
    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.gate, &mut self.up, &mut self.down]);
    }
}

impl<T> Weights<T> {
    /// Mutable references in the same order as [`Weights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.cls_emb];
        if let Some(p) = self.pos_table.as_mut() {
            out.push(p);
        }
        for l in &mut self.encoder {
            out.push(&mut l.attn_norm);
            l.attn.push_mut(&mut out);
            out.push(&mut l.ffn_norm);
            l.ffn.push_mut(&mut out);
        }
        out.push(&mut self.enc_norm);
        for l in &mut self.decoder {
            out.push(&mut l.self_norm);
            l.self_attn.push_mut(&mut out);
            out.push(&mut l.cross_norm);
            l.cross_attn.push_mut(&mut out);
            out.push(&mut l.ffn_norm);
            l.ffn.push_mut(&mut out);
        }
        out.extend([&mut self.final_norm, &mut self.head, &mut self.head_bias]);
        out
    }
}

pub type FmtParams = Weights<Tensor>;

/// A model: its configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmt {
    pub config: FmtConfig,
    pub params: FmtParams,
    pub positions: PositionTables,
}

fn init_attn<R: Rng + ?Sized>(d: usize, rng: &mut R) -> AttnWeights<Tensor> {
    AttnWeights {
        wq: Tensor::trunc_normal(vec![d, d], 0.02, rng),
        wk: Tensor::trunc_normal(vec![d, d], 0.02, rng),
        wv: Tensor::trunc_normal(vec![d, d], 0.02, rng),
        wo: Tensor::trunc_normal(vec![d, d], 0.02, rng),
    }
}

fn init_ffn<R: Rng + ?Sized>(d: usize, h: usize, rng: &mut R) -> FfnWeights<Tensor> {
    FfnWeights {
        gate: Tensor::trunc_normal(vec![d, h], 0.02, rng),
        up: Tensor::trunc_normal(vec![d, h], 0.02, rng),
        down: Tensor::trunc_normal(vec![h, d], 0.02, rng),
    }
}

/// Truncated-normal(0.02) weights, unit norm gains, zero head bias.
pub fn init_params<R: Rng + ?Sized>(config: &FmtConfig, rng: &mut R) -> Result<FmtParams> {
    config.validate()?;
    let d = config.width;
    let h = config.ffn_hidden();
    let ones = || Tensor::full(vec![d], 1.0);
    let tok_emb = Tensor::trunc_normal(vec![config.vocab, d], 0.02, rng);
    let cls_emb = Tensor::trunc_normal(vec![config.num_classes + 1, d], 0.02, rng);
    let pos_table = match config.pos_embed {
        PosEmbedKind::Learned => Some(Tensor::trunc_normal(vec![config.seq_len() + 1, d], 0.02, rng)),
        PosEmbedKind::Sine => None,
    };
    let encoder = (0..config.enc_layers)
        .map(|_| EncoderLayer {
            attn_norm: ones(),
            attn: init_attn(d, rng),
            ffn_norm: ones(),
            ffn: init_ffn(d, h, rng),
        })
        .collect();
    let decoder = (0..config.dec_layers)
        .map(|_| DecoderLayer {
            self_norm: ones(),
            self_attn: init_attn(d, rng),
            cross_norm: ones(),
            cross_attn: init_attn(d, rng),
            ffn_norm: ones(),
            ffn: init_ffn(d, h, rng),
        })
        .collect();
    Ok(Weights {
        tok_emb,
        cls_emb,
        pos_table,
        encoder,
        enc_norm: ones(),
        decoder,
        final_norm: ones(),
        head: Tensor::trunc_normal(vec![d, config.vocab], 0.02, rng),
        head_bias: Tensor::zeros(vec![config.vocab]),
    })
}

impl Fmt {
    pub fn new<R: Rng + ?Sized>(config: FmtConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self::from_parts(config, params))
    }

    pub fn from_parts(config: FmtConfig, params: FmtParams) -> Self {
        let positions = PositionTables::new(&config);
        Self {
            config,
            params,
            positions,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Writes the weights plus `extra` tensors (e.g. optimizer moments); the
    /// model config is stored in the header under `"config"`.
    pub fn save(
        &self,
        path: &Path,
        mut metadata: serde_json::Value,
        extra: &[(String, &Tensor)],
    ) -> Result<()> {
        if !metadata.is_object() {
            metadata = serde_json::json!({});
        }
        metadata["config"] = serde_json::to_value(&self.config)?;
        let mut tensors = self.params.named();
        tensors.extend(extra.iter().map(|(n, t)| (n.clone(), *t)));
        save_checkpoint(path, metadata, &tensors)
    }

    /// Loads a checkpoint; returns the model, the header metadata and any
    /// tensors that are not model weights.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value, Vec<(String, Tensor)>)> {
        let (meta, tensors) = load_checkpoint(path)?;
        let config: FmtConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| SarError::Checkpoint("header has no model config".into()))?,
        )?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = init_params(&config, &mut rng)?;
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut missing = None;
        let params = template.map(|name, t| match by_name.remove(name) {
            Some(loaded) if loaded.shape() == t.shape() => loaded,
            _ => {
                missing.get_or_insert_with(|| name.to_string());
                t.clone()
            }
        });
        if let Some(name) = missing {
            return Err(SarError::Checkpoint(format!("tensor {name} missing or mis-shaped")));
        }
        let mut rest: Vec<(String, Tensor)> = by_name.into_iter().collect();
        rest.sort_by(|a, b| a.0.cmp(&b.0));
        Ok((Self::from_parts(config, params), meta, rest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> FmtConfig {
        FmtConfig::tiny(GridShape::new(4, 4).unwrap(), 8, 4)
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = Fmt::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Fmt::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.all_finite());
        assert_eq!(a.config.head_dim() * a.config.heads, a.config.width);
        assert_eq!(a.config.head_dim(), 16);
        assert_eq!(a.config.ffn_hidden(), 168);
        assert!(a.params.head_bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.width = 24;
        c.heads = 4; // head dim 6 is not a multiple of 4
        assert!(c.validate().is_err());
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut c = tiny();
        c.pos_embed = PosEmbedKind::Learned;
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "tok_emb");
        assert!(names.contains(&"dec.1.cross_attn.wv".to_string()));
        assert_eq!(p.pos_table.as_ref().unwrap().shape(), &[17, 64]);
    }

    #[test]
    fn save_load_round_trip() {
        let m = Fmt::new(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let extra = Tensor::full(vec![2], 3.0);
        m.save(&path, serde_json::json!({"step": 7}), &[("adam.step".into(), &extra)]).unwrap();
        let (back, meta, rest) = Fmt::load(&path).unwrap();
        assert_eq!(meta["step"], 7);
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in back.params.named().iter().zip(m.params.named()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].1, extra);
    }
}
