//! The training loop: per step, draw a plan, reorder the batch, drop the
//! last set from the inputs, randomly null the condition, run the masked
//! forward pass and take an Adam step on the cross-entropy of the
//! supervised rows.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::fmt::{forward_train, Fmt};
use crate::masks::{gen_masks_with, GeneralizedCausalMasks, MaskOptions};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tensor};
use crate::policy::PlanPolicy;
use crate::schedule::{rearrange, GridShape, SetPlan};
pub use crate::synthdata::TokenGrid;
use crate::synthdata::PatternMixtureSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub steps: u64,
    pub policy: PlanPolicy,
    /// Probability of replacing a sample's class with the null class.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Full decoder self-attention for masked-modeling plans.
    pub drop_decoder_self_mask: bool,
    /// Zero means only the final checkpoint is written.
    pub checkpoint_every: u64,
    /// Verify after every step that no set's loss reaches a later set's
    /// token embeddings. Costs one extra backward pass per set.
    pub check_leakage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            steps: 2000,
            policy: PlanPolicy::new(crate::policy::OrderSpec::Random, 16, crate::policy::ScheduleKind::Random),
            cond_dropout: 0.1,
            seed: 0,
            drop_decoder_self_mask: false,
            checkpoint_every: 0,
            check_leakage: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SarError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(SarError::Config(format!("condition dropout {} outside [0, 1)", self.cond_dropout)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(SarError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Anything that yields labelled training grids.
pub trait GridSource {
    fn shape(&self) -> GridShape;
    fn sample_batch(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenGrid>>;
}

impl GridSource for PatternMixtureSource {
    fn shape(&self) -> GridShape {
        self.shape
    }

    fn sample_batch(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenGrid>> {
        self.sample_dataset(count, rng)
    }
}

/// Independent uniform tokens; the entropy is `ln vocab` per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniformSource {
    pub shape: GridShape,
    pub vocab: usize,
    pub num_classes: usize,
}

impl GridSource for UniformSource {
    fn shape(&self) -> GridShape {
        self.shape
    }

    fn sample_batch(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenGrid>> {
        (0..count)
            .map(|_| {
                let tokens = (0..self.shape.len()).map(|_| rng.gen_range(0..self.vocab)).collect();
                TokenGrid::new(self.shape, tokens, rng.gen_range(0..self.num_classes))
            })
            .collect()
    }
}

/// A fixed dataset sampled with replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSource {
    pub grids: Vec<TokenGrid>,
}

impl GridSource for DatasetSource {
    fn shape(&self) -> GridShape {
        self.grids[0].shape
    }

    fn sample_batch(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenGrid>> {
        if self.grids.is_empty() {
            return Err(SarError::Config("empty dataset".into()));
        }
        Ok((0..count).map(|_| self.grids[rng.gen_range(0..self.grids.len())].clone()).collect())
    }
}

/// Stream `step` of the run's RNG, so a resumed run draws what an
/// uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Training masks for a plan.
pub fn training_masks(plan: &SetPlan, drop_decoder_self_mask: bool) -> Result<GeneralizedCausalMasks> {
    gen_masks_with(&plan.intervals, MaskOptions::for_training(plan.supervise_first_set, drop_decoder_self_mask))
}

/// The encoder inputs, targets and condition ids of a batch under `plan`.
pub struct PreparedBatch {
    pub seen: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub classes: Vec<usize>,
    pub weights: Vec<f32>,
}

/// Reorders every grid by the plan, drops the last set from the inputs and
/// nulls each class with probability `cond_dropout`.
pub fn prepare_batch<R: Rng + ?Sized>(
    batch: &[TokenGrid],
    plan: &SetPlan,
    null_class: usize,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let n = plan.len();
    let seen_len = n - plan.intervals.last();
    let row_weights = plan.row_weights();
    let mut out = PreparedBatch {
        seen: Vec::with_capacity(batch.len()),
        targets: Vec::with_capacity(batch.len() * n),
        classes: Vec::with_capacity(batch.len()),
        weights: Vec::with_capacity(batch.len() * n),
    };
    for g in batch {
        let causal = rearrange(&g.tokens, &plan.order)?;
        out.seen.push(causal[..seen_len].to_vec());
        out.targets.extend_from_slice(&causal);
        let drop = cond_dropout > 0.0 && rng.gen_bool(cond_dropout);
        out.classes.push(if drop { null_class } else { g.class_id });
        out.weights.extend_from_slice(&row_weights);
    }
    Ok(out)
}

/// Runs one backward pass per set and fails if any set's loss has a
/// non-zero gradient on the embedding of a token from that set or later.
pub fn check_leakage(model: &Fmt, prepared: &PreparedBatch, plan: &SetPlan, masks: &GeneralizedCausalMasks) -> Result<()> {
    let n = plan.len();
    let seen_len = n - plan.intervals.last();
    let d = model.config.width;
    for k in 0..plan.num_sets() {
        let range = plan.intervals.range(k);
        if range.is_empty() || range.start >= seen_len {
            continue;
        }
        let mut f = forward_train(model, &prepared.seen, &prepared.classes, plan, masks, true)?;
        let weights: Vec<f32> = (0..prepared.targets.len())
            .map(|i| if range.contains(&(i % n)) { 1.0 } else { 0.0 })
            .collect();
        let loss = f.graph.cross_entropy(f.logits, &prepared.targets, &weights)?;
        f.graph.backward(loss)?;
        let grad = f
            .graph
            .grad(f.token_embeddings)
            .ok_or_else(|| SarError::Contract("token embeddings carry no gradient".into()))?;
        for b in 0..prepared.seen.len() {
            for t in range.start..seen_len {
                let row = (b * seen_len + t) * d;
                if grad[row..row + d].iter().any(|&g| g != 0.0) {
                    return Err(SarError::Contract(format!(
                        "loss of set {k} has gradient on causal token {t} of sample {b}"
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f32,
    pub sets: usize,
}

/// A model with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Fmt,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Fmt, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params: Vec<&Tensor> = model.params.named().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &params);
        Ok(Self { model, adam, config, step: 0 })
    }

    /// One update on `batch` with a plan drawn from the policy.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[TokenGrid], rng: &mut R) -> Result<StepStats> {
        let plan = self.config.policy.sample(self.model.config.grid, self.config.seed, rng)?;
        self.train_step_with_plan(batch, &plan, rng)
    }

    pub fn train_step_with_plan<R: Rng + ?Sized>(
        &mut self,
        batch: &[TokenGrid],
        plan: &SetPlan,
        rng: &mut R,
    ) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(SarError::Config("empty batch".into()));
        }
        for g in batch {
            if g.shape != self.model.config.grid {
                return Err(SarError::Dimension(format!(
                    "grid {}x{} does not match the model's {}x{}",
                    g.shape.height, g.shape.width, self.model.config.grid.height, self.model.config.grid.width
                )));
            }
            g.validate(self.model.config.vocab)?;
        }
        let masks = training_masks(plan, self.config.drop_decoder_self_mask)?;
        let prepared = prepare_batch(batch, plan, self.model.config.null_class(), self.config.cond_dropout, rng)?;
        let mut f = forward_train(&self.model, &prepared.seen, &prepared.classes, plan, &masks, true)?;
        let loss = f.graph.cross_entropy(f.logits, &prepared.targets, &prepared.weights)?;
        f.graph.backward(loss)?;
        let loss_value = f.graph.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(SarError::Contract(format!("non-finite loss at step {}", self.step)));
        }
        let vars: Vec<_> = f.weights.named().into_iter().map(|(_, v)| *v).collect();
        let zeros: Vec<Vec<f32>> = vars.iter().map(|&v| vec![0.0; f.graph.value(v).len()]).collect();
        let grads: Vec<&[f32]> = vars
            .iter()
            .zip(&zeros)
            .map(|(&v, z)| f.graph.grad(v).unwrap_or(z.as_slice()))
            .collect();
        if self.config.check_leakage {
            check_leakage(&self.model, &prepared, plan, &masks)?;
        }
        adam_step(&mut self.model.params.tensors_mut(), &grads, &mut self.adam)?;
        self.step += 1;
        Ok(StepStats { step: self.step, loss: loss_value, sets: plan.num_sets() })
    }

    /// Saves weights, Adam moments and the step counter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self.model.params.named().into_iter().map(|(n, _)| n).collect();
        let moments: Vec<(String, Tensor)> = names
            .iter()
            .enumerate()
            .flat_map(|(i, name)| {
                let n = self.adam.first[i].len();
                [
                    (format!("adam.m.{name}"), Tensor::new(vec![n], self.adam.first[i].clone())),
                    (format!("adam.v.{name}"), Tensor::new(vec![n], self.adam.second[i].clone())),
                ]
            })
            .map(|(n, t)| t.map(|t| (n, t)))
            .collect::<Result<_>>()?;
        let extra: Vec<(String, &Tensor)> = moments.iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = serde_json::json!({
            "step": self.step,
            "adam_step": self.adam.step,
            "adam": self.adam.config,
            "train": self.config,
        });
        self.model.save(path, meta, &extra)
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let (model, meta, extra) = Fmt::load(path)?;
        let config: TrainConfig = serde_json::from_value(
            meta.get("train").cloned().ok_or_else(|| SarError::Checkpoint("no training config".into()))?,
        )?;
        let step = meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut trainer = Trainer::new(model, config)?;
        if let Some(adam) = meta.get("adam") {
            trainer.adam.config = serde_json::from_value(adam.clone())?;
        }
        trainer.adam.step = meta.get("adam_step").and_then(|v| v.as_u64()).unwrap_or(0);
        trainer.step = step;
        let mut extra: std::collections::HashMap<String, Tensor> = extra.into_iter().collect();
        let names: Vec<String> = trainer.model.params.named().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, buf) in [("adam.m", &mut trainer.adam.first[i]), ("adam.v", &mut trainer.adam.second[i])] {
                match extra.remove(&format!("{prefix}.{name}")) {
                    Some(t) if t.len() == buf.len() => *buf = t.into_data(),
                    Some(_) => return Err(SarError::Checkpoint(format!("{prefix}.{name} is mis-sized"))),
                    None if step == 0 => {}
                    None => return Err(SarError::Checkpoint(format!("{prefix}.{name} missing"))),
                }
            }
        }
        Ok(trainer)
    }

    /// Runs steps until `config.steps` are done, drawing each batch and plan
    /// from the step's own RNG stream.
    pub fn run<S: GridSource + ?Sized>(
        &mut self,
        source: &S,
        mut on_step: impl FnMut(&Trainer, &StepStats) -> Result<()>,
    ) -> Result<Vec<StepStats>> {
        let mut stats = Vec::new();
        while self.step < self.config.steps {
            let mut rng = step_rng(self.config.seed, self.step);
            let batch = source.sample_batch(self.config.batch_size, &mut rng)?;
            let s = self.train_step(&batch, &mut rng)?;
            on_step(self, &s)?;
            stats.push(s);
        }
        Ok(stats)
    }
}

/// Trailing mean over the last `window` values.
pub fn smoothed(values: &[f32], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        sum += v as f64;
        if i >= window {
            sum -= values[i - window] as f64;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub stats: Vec<StepStats>,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

pub const LOSS_WINDOW: usize = 100;

/// Trains to `trainer.config.steps`; with `out_dir`, writes `loss.csv`
/// (one row per step), periodic `step-<n>.ckpt` files and a final
/// `model.ckpt`.
pub fn train_loop<S: GridSource + ?Sized>(
    mut trainer: Trainer,
    source: &S,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if source.shape() != trainer.model.config.grid {
        return Err(SarError::Dimension("source grid does not match the model".into()));
    }
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
            writeln!(f, "step,loss,smoothed_loss,sets")?;
            Some(f)
        }
        None => None,
    };
    let every = trainer.config.checkpoint_every;
    let mut history: Vec<f32> = Vec::new();
    let stats = trainer.run(source, |t, s| {
        history.push(s.loss);
        if let Some(f) = csv.as_mut() {
            let sm = smoothed(&history[history.len().saturating_sub(LOSS_WINDOW)..], LOSS_WINDOW);
            writeln!(f, "{},{},{:.6},{}", s.step, s.loss, sm.last().copied().unwrap_or(0.0), s.sets)?;
        }
        if let (Some(dir), true) = (out_dir, every > 0 && s.step % every == 0) {
            t.save(&dir.join(format!("step-{}.ckpt", s.step)))?;
        }
        log::debug!("step {} loss {:.4} sets {}", s.step, s.loss, s.sets);
        Ok(())
    })?;
    if let Some(mut f) = csv {
        f.flush()?;
    }
    let (checkpoint, loss_csv) = match out_dir {
        Some(dir) => {
            let path = dir.join("model.ckpt");
            trainer.save(&path)?;
            (Some(path), Some(dir.join("loss.csv")))
        }
        None => (None, None),
    };
    Ok(TrainOutcome { trainer, stats, checkpoint, loss_csv })
}
