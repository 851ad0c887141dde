//! Set-wise generation: sampling controls, classifier-free guidance, the
//! cached and recomputing decoding paths, painting and cost benchmarks.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::fmt::{forward_prefix, forward_step, teacher_forced_logits, AttnOpCount, Fmt, KvCache, SeenInput};
use crate::masks::{gen_masks, GeneralizedCausalMasks};
use crate::policy::PlanPolicy;
use crate::schedule::{
    cosine_intervals, rearrange, scatter, GridShape, OrderKind, OutputIntervals, SequenceOrder, SetPlan,
};
use crate::synthdata::TokenGrid;

/// Temperatures below this sample the argmax.
pub const GREEDY_TEMPERATURE: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f32,
    /// Keep the `top_k` most likely tokens; 0 keeps all.
    pub top_k: usize,
    pub top_p: f32,
    /// Guidance scale; 1 disables guidance.
    pub cfg_scale: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 0, top_p: 1.0, cfg_scale: 2.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self { temperature: 0.0, cfg_scale: 1.0, ..Self::default() }
    }

    /// Unguided sampling from the model distribution.
    pub fn plain() -> Self {
        Self { cfg_scale: 1.0, ..Self::default() }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature < GREEDY_TEMPERATURE || self.top_k == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SarError::Config(m));
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature {} must be non-negative", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top-p {} must lie in (0, 1]", self.top_p));
        }
        if !(self.cfg_scale >= 1.0) || !self.cfg_scale.is_finite() {
            return bad(format!("guidance scale {} must be at least 1", self.cfg_scale));
        }
        Ok(())
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one token: temperature, then top-k, then nucleus filtering, then a
/// categorical draw from the renormalized remainder.
pub fn sample_logits<R: Rng + ?Sized>(row: &[f32], sampler: &SamplerConfig, rng: &mut R) -> Result<usize> {
    if row.is_empty() || row.iter().any(|v| !v.is_finite()) {
        return Err(SarError::Contract("logit row is empty or not finite".into()));
    }
    if sampler.is_greedy() {
        return Ok(argmax(row));
    }
    let t = sampler.temperature as f64;
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    if sampler.top_k > 0 {
        idx.truncate(sampler.top_k);
    }
    let max = row[idx[0]] as f64;
    let mut probs: Vec<f64> = idx.iter().map(|&i| ((row[i] as f64 - max) / t).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    if sampler.top_p < 1.0 {
        let mut acc = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if acc >= sampler.top_p as f64 {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        idx.truncate(keep);
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(idx[i]);
        }
    }
    Ok(*idx.last().expect("at least one candidate"))
}

/// `uncond + scale (cond - uncond)`; scale 1 returns `cond` unchanged.
pub fn cfg_combine(cond: &[f32], uncond: &[f32], scale: f32) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(SarError::LengthMismatch { expected: cond.len(), actual: uncond.len() });
    }
    if scale == 1.0 {
        return Ok(cond.to_vec());
    }
    Ok(cond.iter().zip(uncond).map(|(c, u)| u + scale * (c - u)).collect())
}

/// `log softmax(row)[target]` in f64.
pub fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    row[target] as f64 - max - z.ln()
}

/// Teacher-forced log probability of `grid` (row-major) under the plan:
/// the sum over supervised cells of the per-token log softmax.
pub fn grid_log_prob(
    model: &Fmt,
    plan: &SetPlan,
    masks: &GeneralizedCausalMasks,
    class: usize,
    grid: &[usize],
) -> Result<f64> {
    let causal = rearrange(grid, &plan.order)?;
    let logits = teacher_forced_logits(model, class, &causal, plan, masks)?;
    let vocab = model.config.vocab;
    let weights = plan.row_weights();
    Ok(causal
        .iter()
        .enumerate()
        .filter(|&(t, _)| weights[t] > 0.0)
        .map(|(t, &tok)| log_softmax_at(&logits[t * vocab..(t + 1) * vocab], tok))
        .sum())
}

/// Mean teacher-forced NLL per supervised token over `grids`, with one plan
/// drawn from `policy` per grid.
pub fn evaluate_nll<R: Rng + ?Sized>(
    model: &Fmt,
    grids: &[TokenGrid],
    policy: &PlanPolicy,
    fixed_seed: u64,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for g in grids {
        let plan = policy.sample(model.config.grid, fixed_seed, rng)?;
        let masks = gen_masks(&plan.intervals)?;
        total -= grid_log_prob(model, &plan, &masks, g.class_id, &g.tokens)?;
        count += plan.row_weights().iter().filter(|&&w| w > 0.0).count();
    }
    if count == 0 {
        return Err(SarError::Contract("no supervised tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub grid: TokenGrid,
    /// Attention inner products per decoding step.
    pub per_set: Vec<AttnOpCount>,
    pub ops: AttnOpCount,
    /// Log probability of the drawn tokens under the unguided, untempered
    /// model (only meaningful when guidance is off).
    pub log_prob: f64,
}

/// One logits source per stream: the conditional stream and, with guidance,
/// the null-class stream.
struct Stream {
    class: usize,
    cache: Option<KvCache>,
}

impl Stream {
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        model: &Fmt,
        plan: &SetPlan,
        masks: &GeneralizedCausalMasks,
        causal: &[usize],
        k: usize,
        counter: &mut AttnOpCount,
    ) -> Result<Vec<f32>> {
        match &mut self.cache {
            Some(cache) => {
                let seen = if k == 0 {
                    SeenInput::Class(self.class)
                } else {
                    let r = plan.intervals.range(k - 1);
                    SeenInput::Tokens { tokens: &causal[r], positions: plan.set_positions(k - 1) }
                };
                forward_step(model, cache, seen, plan.set_positions(k), counter)
            }
            None => forward_prefix(model, self.class, causal, plan, masks, k, counter),
        }
    }
}

fn check_generation(model: &Fmt, class: usize, plan: &SetPlan, sampler: &SamplerConfig) -> Result<()> {
    sampler.validate()?;
    if plan.len() != model.config.seq_len() {
        return Err(SarError::LengthMismatch { expected: model.config.seq_len(), actual: plan.len() });
    }
    if class > model.config.num_classes {
        return Err(SarError::OutOfRange { index: class, limit: model.config.num_classes + 1 });
    }
    Ok(())
}

/// Generates a grid set by set. When the plan's first set is unsupervised,
/// its tokens are taken from `prefix` instead of being sampled.
pub fn generate_with_prefix<R: Rng + ?Sized>(
    model: &Fmt,
    class: usize,
    plan: &SetPlan,
    prefix: &[usize],
    sampler: &SamplerConfig,
    use_cache: bool,
    rng: &mut R,
) -> Result<Generation> {
    check_generation(model, class, plan, sampler)?;
    let first = if plan.supervise_first_set { 0 } else { plan.intervals.sizes()[0] };
    if prefix.len() != first {
        return Err(SarError::LengthMismatch { expected: first, actual: prefix.len() });
    }
    let n = plan.len();
    let vocab = model.config.vocab;
    // Generation is always block-causal, whatever the plan was trained with.
    let masks = gen_masks(&plan.intervals)?;
    let guided = sampler.cfg_scale != 1.0;
    let mut streams = vec![Stream { class, cache: use_cache.then(|| KvCache::new(model)) }];
    if guided {
        streams.push(Stream { class: model.config.null_class(), cache: use_cache.then(|| KvCache::new(model)) });
    }

    let mut causal = vec![0usize; n];
    causal[..first].copy_from_slice(prefix);
    let mut grid = vec![0usize; n];
    let mut writes = vec![0u32; n];
    let mut per_set = Vec::with_capacity(plan.num_sets());
    let mut ops = AttnOpCount::default();
    let mut log_prob = 0.0;
    for k in 0..plan.num_sets() {
        let mut counter = AttnOpCount::default();
        let range = plan.intervals.range(k);
        let cond = streams[0].step(model, plan, &masks, &causal, k, &mut counter)?;
        let fixed = k == 0 && !plan.supervise_first_set;
        let logits = if guided && !fixed {
            let uncond = streams[1].step(model, plan, &masks, &causal, k, &mut counter)?;
            cfg_combine(&cond, &uncond, sampler.cfg_scale)?
        } else {
            if guided {
                // keep the null stream's cache in step with the conditional one
                streams[1].step(model, plan, &masks, &causal, k, &mut counter)?;
            }
            cond.clone()
        };
        if !fixed {
            for (i, t) in range.clone().enumerate() {
                let row = &logits[i * vocab..(i + 1) * vocab];
                let tok = sample_logits(row, sampler, rng)?;
                log_prob += log_softmax_at(&cond[i * vocab..(i + 1) * vocab], tok);
                causal[t] = tok;
            }
        }
        scatter(&mut grid, &causal[range.clone()], &plan.order, &plan.intervals, k)?;
        for &p in plan.set_positions(k) {
            writes[p] += 1;
        }
        ops.add(&counter);
        per_set.push(counter);
    }
    if writes.iter().any(|&w| w != 1) {
        return Err(SarError::Contract("a grid cell was not written exactly once".into()));
    }
    Ok(Generation { grid: TokenGrid::new(model.config.grid, grid, class)?, per_set, ops, log_prob })
}

/// Generates a full grid under a plan whose sets are all sampled.
pub fn generate<R: Rng + ?Sized>(
    model: &Fmt,
    class: usize,
    plan: &SetPlan,
    sampler: &SamplerConfig,
    use_cache: bool,
    rng: &mut R,
) -> Result<Generation> {
    if !plan.supervise_first_set {
        return Err(SarError::Contract("generation needs the first set's tokens; use paint".into()));
    }
    generate_with_prefix(model, class, plan, &[], sampler, use_cache, rng)
}

/// Known cells for painting; every other cell is generated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaintSpec {
    pub known: BTreeMap<usize, usize>,
}

impl PaintSpec {
    pub fn unknown(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|p| !self.known.contains_key(p)).collect()
    }

    pub fn validate(&self, shape: GridShape, vocab: usize) -> Result<()> {
        for (&p, &t) in &self.known {
            if p >= shape.len() {
                return Err(SarError::OutOfRange { index: p, limit: shape.len() });
            }
            if t >= vocab {
                return Err(SarError::OutOfRange { index: t, limit: vocab });
            }
        }
        Ok(())
    }
}

/// The painting plan: all known cells as one leading context set, then the
/// unknown cells in random order split into at most `sets` cosine-sized
/// sets. `None` when nothing is unknown.
pub fn paint_plan<R: Rng + ?Sized>(shape: GridShape, spec: &PaintSpec, sets: usize, rng: &mut R) -> Result<Option<SetPlan>> {
    let mut unknown = spec.unknown(shape.len());
    if unknown.is_empty() {
        return Ok(None);
    }
    if sets == 0 {
        return Err(SarError::Infeasible("painting needs at least one set".into()));
    }
    unknown.shuffle(rng);
    let tail = cosine_intervals(unknown.len(), sets.min(unknown.len()))?;
    let known: Vec<usize> = spec.known.keys().copied().collect();
    let mut perm = known.clone();
    perm.extend(&unknown);
    let order = SequenceOrder::from_perm(OrderKind::Custom, perm)?;
    if known.is_empty() {
        return Ok(Some(SetPlan::new(order, tail, true)?));
    }
    let mut sizes = vec![known.len()];
    sizes.extend_from_slice(tail.sizes());
    Ok(Some(SetPlan::new(order, OutputIntervals::new(sizes)?, false)?))
}

/// Completes a partially known grid. Known cells pass through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn paint<R: Rng + ?Sized>(
    model: &Fmt,
    class: usize,
    spec: &PaintSpec,
    sets: usize,
    sampler: &SamplerConfig,
    use_cache: bool,
    rng: &mut R,
) -> Result<TokenGrid> {
    let shape = model.config.grid;
    spec.validate(shape, model.config.vocab)?;
    let Some(plan) = paint_plan(shape, spec, sets, rng)? else {
        let tokens = (0..shape.len()).map(|p| spec.known[&p]).collect();
        return TokenGrid::new(shape, tokens, class);
    };
    let prefix: Vec<usize> = spec.known.values().copied().collect();
    let out = generate_with_prefix(model, class, &plan, &prefix, sampler, use_cache, rng)?;
    if spec.known.iter().any(|(&p, &t)| out.grid.tokens[p] != t) {
        return Err(SarError::Contract("painting altered a known cell".into()));
    }
    Ok(out.grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub sets: usize,
    pub use_cache: bool,
    pub attention_ops: u64,
    pub ops: AttnOpCount,
    pub set_sizes: Vec<usize>,
    pub per_set: Vec<AttnOpCount>,
    pub wall_time_s: f64,
}

/// Times one generation and reports its attention cost.
pub fn bench<R: Rng + ?Sized>(
    model: &Fmt,
    plan: &SetPlan,
    sampler: &SamplerConfig,
    use_cache: bool,
    rng: &mut R,
) -> Result<BenchReport> {
    let start = Instant::now();
    let g = generate(model, 0, plan, sampler, use_cache, rng)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        n: plan.len(),
        sets: plan.num_sets(),
        use_cache,
        attention_ops: g.ops.total(),
        ops: g.ops,
        set_sizes: plan.intervals.sizes().to_vec(),
        per_set: g.per_set,
        wall_time_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmt::FmtConfig;
    use crate::schedule::{random_order, raster_order};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(vocab: usize) -> Fmt {
        let cfg = FmtConfig::tiny(GridShape::new(4, 4).unwrap(), vocab, 3);
        Fmt::new(cfg, &mut rng(1)).unwrap()
    }

    #[test]
    fn greedy_and_top1_take_the_argmax() {
        let row = [0.1, 2.0, -1.0, 1.9];
        let mut r = rng(0);
        for temperature in [0.0, 1e-7] {
            let s = SamplerConfig { temperature, ..SamplerConfig::default() };
            assert_eq!(sample_logits(&row, &s, &mut r).unwrap(), 1);
        }
        let s = SamplerConfig { top_k: 1, temperature: 50.0, ..SamplerConfig::default() };
        for _ in 0..50 {
            assert_eq!(sample_logits(&row, &s, &mut r).unwrap(), 1);
        }
    }

    #[test]
    fn default_sampling_matches_softmax() {
        let row = [1f32.ln(), 2f32.ln(), 3f32.ln()];
        let mut r = rng(2);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_logits(&row, &SamplerConfig::default(), &mut r).unwrap()] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            assert!((*c as f64 / draws as f64 - (i + 1) as f64 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn top_k_and_top_p_restrict_support() {
        let row = [0.0, 3.0, 2.9, -5.0, 1.0];
        let mut r = rng(3);
        let k2 = SamplerConfig { top_k: 2, ..SamplerConfig::default() };
        let p = SamplerConfig { top_p: 0.5, ..SamplerConfig::default() };
        for _ in 0..500 {
            assert!(matches!(sample_logits(&row, &k2, &mut r).unwrap(), 1 | 2));
            // the two leading tokens hold 0.48 and 0.43 of the mass
            assert!(matches!(sample_logits(&row, &p, &mut r).unwrap(), 1 | 2));
        }
        let p = SamplerConfig { top_p: 0.45, ..SamplerConfig::default() };
        for _ in 0..200 {
            assert_eq!(sample_logits(&row, &p, &mut r).unwrap(), 1);
        }
        assert!(sample_logits(&[f32::NEG_INFINITY, 0.0], &SamplerConfig::default(), &mut r).is_err());
        assert!(sample_logits(&[f32::NAN], &SamplerConfig::default(), &mut r).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        assert_eq!(cfg_combine(&[1.0, 0.5], &[0.3, 7.0], 1.0).unwrap(), vec![1.0, 0.5]);
        assert_eq!(cfg_combine(&[1.0, -2.0], &[1.0, -2.0], 3.5).unwrap(), vec![1.0, -2.0]);
        assert_eq!(cfg_combine(&[1.0, 0.0], &[0.0, 0.0], 2.0).unwrap(), vec![2.0, 0.0]);
        assert!(cfg_combine(&[1.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn cache_on_and_off_agree_under_greedy_and_guided_sampling() {
        let m = tiny(8);
        let mut r = rng(4);
        for i in 0..10 {
            let k = r.gen_range(1..=16);
            let plan = SetPlan::new(random_order(m.config.grid, &mut r), cosine_intervals(16, k).unwrap(), true).unwrap();
            let sampler = if i % 2 == 0 { SamplerConfig::greedy() } else { SamplerConfig { seed: 0, ..SamplerConfig::default() } };
            let a = generate(&m, 1, &plan, &sampler, true, &mut rng(i)).unwrap();
            let b = generate(&m, 1, &plan, &sampler, false, &mut rng(i)).unwrap();
            assert_eq!(a.grid, b.grid);
            if k >= 2 {
                assert!(a.ops.total() < b.ops.total());
            }
        }
    }

    #[test]
    fn paint_keeps_known_cells() {
        let m = tiny(8);
        let mut r = rng(5);
        for _ in 0..20 {
            let mut spec = PaintSpec::default();
            for p in 0..16 {
                if r.gen_bool(0.4) {
                    spec.known.insert(p, r.gen_range(0..8));
                }
            }
            let g = paint(&m, 0, &spec, 4, &SamplerConfig::default(), true, &mut r).unwrap();
            assert!(spec.known.iter().all(|(&p, &t)| g.tokens[p] == t));
        }
        let full = PaintSpec { known: (0..16).map(|p| (p, p % 8)).collect() };
        let g = paint(&m, 0, &full, 4, &SamplerConfig::default(), true, &mut r).unwrap();
        assert_eq!(g.tokens, (0..16).map(|p| p % 8).collect::<Vec<_>>());
    }

    #[test]
    fn paint_without_known_cells_is_generation() {
        let m = tiny(8);
        let spec = PaintSpec::default();
        let a = paint(&m, 2, &spec, 5, &SamplerConfig::default(), true, &mut rng(6)).unwrap();
        let mut r = rng(6);
        let plan = paint_plan(m.config.grid, &spec, 5, &mut r).unwrap().unwrap();
        let b = generate(&m, 2, &plan, &SamplerConfig::default(), true, &mut r).unwrap();
        assert_eq!(a, b.grid);
    }

    #[test]
    fn single_set_counts_cross_attention_once() {
        let m = tiny(8);
        let plan = SetPlan::new(raster_order(m.config.grid), OutputIntervals::new(vec![16]).unwrap(), true).unwrap();
        let a = bench(&m, &plan, &SamplerConfig::greedy(), true, &mut rng(7)).unwrap();
        let b = bench(&m, &plan, &SamplerConfig::greedy(), false, &mut rng(7)).unwrap();
        assert_eq!(a.ops.decoder_cross, b.ops.decoder_cross);
        assert_eq!(a.per_set.len(), 1);
    }

    #[test]
    fn generation_rejects_mismatched_inputs() {
        let m = tiny(8);
        let plan = SetPlan::new(raster_order(GridShape::new(2, 2).unwrap()), OutputIntervals::ones(4), true).unwrap();
        assert!(generate(&m, 0, &plan, &SamplerConfig::default(), true, &mut rng(0)).is_err());
        let plan = SetPlan::new(raster_order(m.config.grid), OutputIntervals::ones(16), true).unwrap();
        assert!(generate(&m, 9, &plan, &SamplerConfig::default(), true, &mut rng(0)).is_err());
        let bad = SamplerConfig { top_p: 0.0, ..SamplerConfig::default() };
        assert!(generate(&m, 0, &plan, &bad, true, &mut rng(0)).is_err());
    }
}
