//! Synthetic token grids with closed-form distributions.
//!
//! A pattern-mixture source picks one of `M` template grids with
//! class-dependent weights, then replaces every cell independently, with
//! probability `flip_prob`, by a uniformly drawn token. Joint, marginal and
//! conditional probabilities are sums over templates of per-cell products,
//! so every quantity below is exact.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::fmt::Fmt;
use crate::schedule::{GridShape, SetPlan};

/// Largest table `model_joint_enumeration` will build.
pub const MAX_ENUMERATION: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub shape: GridShape,
    /// Row-major token ids.
    pub tokens: Vec<usize>,
    pub class_id: usize,
}

impl TokenGrid {
    pub fn new(shape: GridShape, tokens: Vec<usize>, class_id: usize) -> Result<Self> {
        if tokens.len() != shape.len() {
            return Err(SarError::LengthMismatch { expected: shape.len(), actual: tokens.len() });
        }
        Ok(Self { shape, tokens, class_id })
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.tokens.len() != self.shape.len() {
            return Err(SarError::LengthMismatch { expected: self.shape.len(), actual: self.tokens.len() });
        }
        match self.tokens.iter().find(|&&t| t >= vocab) {
            Some(&t) => Err(SarError::OutOfRange { index: t, limit: vocab }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMixtureSource {
    pub shape: GridShape,
    pub vocab: usize,
    pub templates: Vec<Vec<usize>>,
    /// `weights[c][m]`: probability of template `m` under class `c`.
    pub weights: Vec<Vec<f64>>,
    pub flip_prob: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl PatternMixtureSource {
    pub fn new(
        shape: GridShape,
        vocab: usize,
        templates: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
        flip_prob: f64,
    ) -> Result<Self> {
        let s = Self { shape, vocab, templates, weights, flip_prob };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SarError::Config(m));
        if self.vocab == 0 || self.templates.is_empty() || self.weights.is_empty() {
            return bad("source needs a vocabulary, templates and class weights".into());
        }
        if !(0.0..1.0).contains(&self.flip_prob) {
            return bad(format!("flip probability {} outside [0, 1)", self.flip_prob));
        }
        for t in &self.templates {
            if t.len() != self.shape.len() || t.iter().any(|&v| v >= self.vocab) {
                return bad("template does not fit the grid or vocabulary".into());
            }
        }
        for (c, w) in self.weights.iter().enumerate() {
            let sum: f64 = w.iter().sum();
            if w.len() != self.templates.len() || w.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("weights of class {c} are not a distribution over the templates"));
            }
        }
        Ok(())
    }

    /// Random distinct templates; class `c` puts 0.6 on template `c mod M`
    /// and 0.4 on the next one.
    pub fn random<R: Rng + ?Sized>(
        shape: GridShape,
        vocab: usize,
        num_templates: usize,
        num_classes: usize,
        flip_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut templates: Vec<Vec<usize>> = Vec::with_capacity(num_templates);
        let mut attempts = 0;
        while templates.len() < num_templates {
            let t: Vec<usize> = (0..shape.len()).map(|_| rng.gen_range(0..vocab)).collect();
            if !templates.contains(&t) {
                templates.push(t);
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(SarError::Config("cannot draw distinct templates".into()));
            }
        }
        let weights = (0..num_classes)
            .map(|c| {
                let mut w = vec![0.0; num_templates];
                if num_templates == 1 {
                    w[0] = 1.0;
                } else {
                    w[c % num_templates] = 0.6;
                    w[(c + 1) % num_templates] = 0.4;
                }
                w
            })
            .collect();
        Self::new(shape, vocab, templates, weights, flip_prob)
    }

    /// 4x4 grid, vocabulary 8, four templates and four classes, 10% flips.
    pub fn desk<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Self::random(GridShape::new(4, 4)?, 8, 4, 4, 0.1, rng)
    }

    /// 2x2 grid, vocabulary 3: small enough to enumerate every grid.
    pub fn enumeration<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Self::random(GridShape::new(2, 2)?, 3, 2, 2, 0.1, rng)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    /// Template weights of `class`; the id `num_classes` (the null class)
    /// gets the average over classes.
    pub fn class_weights(&self, class: usize) -> Result<Vec<f64>> {
        let c = self.num_classes();
        if class < c {
            Ok(self.weights[class].clone())
        } else if class == c {
            let m = self.num_templates();
            Ok((0..m).map(|i| self.weights.iter().map(|w| w[i]).sum::<f64>() / c as f64).collect())
        } else {
            Err(SarError::OutOfRange { index: class, limit: c + 1 })
        }
    }

    /// `P(token | template m)` at cell `p`.
    pub fn cell_prob(&self, m: usize, p: usize, token: usize) -> f64 {
        let hit = if self.templates[m][p] == token { 1.0 - self.flip_prob } else { 0.0 };
        hit + self.flip_prob / self.vocab as f64
    }

    pub fn sample_grid<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<TokenGrid> {
        let w = self.class_weights(class)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut m = w.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            acc += wi;
            if u < acc {
                m = i;
                break;
            }
        }
        let tokens = self.templates[m]
            .iter()
            .map(|&t| {
                if self.flip_prob > 0.0 && rng.gen_bool(self.flip_prob) {
                    rng.gen_range(0..self.vocab)
                } else {
                    t
                }
            })
            .collect();
        TokenGrid::new(self.shape, tokens, class)
    }

    /// Grids with uniformly drawn classes.
    pub fn sample_dataset<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<TokenGrid>> {
        (0..count)
            .map(|_| {
                let c = rng.gen_range(0..self.num_classes());
                self.sample_grid(c, rng)
            })
            .collect()
    }

    fn check_cells(&self, cells: &[(usize, usize)]) -> Result<()> {
        for &(p, t) in cells {
            if p >= self.shape.len() {
                return Err(SarError::OutOfRange { index: p, limit: self.shape.len() });
            }
            if t >= self.vocab {
                return Err(SarError::OutOfRange { index: t, limit: self.vocab });
            }
        }
        Ok(())
    }

    /// `log w_m + sum over cells of log P(token | m)` for every template.
    fn template_log_scores(&self, class: usize, cells: &[(usize, usize)]) -> Result<Vec<f64>> {
        self.check_cells(cells)?;
        let w = self.class_weights(class)?;
        Ok((0..self.num_templates())
            .map(|m| w[m].ln() + cells.iter().map(|&(p, t)| self.cell_prob(m, p, t).ln()).sum::<f64>())
            .collect())
    }

    /// Log probability of the observed `(position, token)` cells, with every
    /// other cell marginalized out.
    pub fn cells_logprob(&self, class: usize, cells: &[(usize, usize)]) -> Result<f64> {
        Ok(log_sum_exp(&self.template_log_scores(class, cells)?))
    }

    pub fn true_joint_logprob(&self, grid: &[usize], class: usize) -> Result<f64> {
        if grid.len() != self.shape.len() {
            return Err(SarError::LengthMismatch { expected: self.shape.len(), actual: grid.len() });
        }
        let cells: Vec<(usize, usize)> = grid.iter().copied().enumerate().collect();
        self.cells_logprob(class, &cells)
    }

    /// Posterior over templates given the observed cells.
    pub fn template_posterior(&self, class: usize, known: &[(usize, usize)]) -> Result<Vec<f64>> {
        let scores = self.template_log_scores(class, known)?;
        let z = log_sum_exp(&scores);
        Ok(scores.iter().map(|s| (s - z).exp()).collect())
    }

    /// Distribution of cell `p` given the observed cells.
    pub fn predictive(&self, class: usize, known: &[(usize, usize)], p: usize) -> Result<Vec<f64>> {
        let post = self.template_posterior(class, known)?;
        Ok((0..self.vocab)
            .map(|v| post.iter().enumerate().map(|(m, w)| w * self.cell_prob(m, p, v)).sum())
            .collect())
    }

    pub fn cell_marginal(&self, class: usize, p: usize) -> Result<Vec<f64>> {
        self.predictive(class, &[], p)
    }

    /// Smallest achievable teacher-forced NLL (nats, summed over supervised
    /// cells) of `grid` for any model that predicts each set's cells
    /// independently given the earlier sets. The optimum outputs the exact
    /// per-cell predictive given the earlier sets.
    pub fn optimal_plan_nll(&self, grid: &[usize], class: usize, plan: &SetPlan) -> Result<f64> {
        if grid.len() != self.shape.len() || plan.len() != grid.len() {
            return Err(SarError::LengthMismatch { expected: self.shape.len(), actual: grid.len() });
        }
        let mut known: Vec<(usize, usize)> = Vec::with_capacity(grid.len());
        let mut nll = 0.0;
        for k in 0..plan.num_sets() {
            let positions = plan.set_positions(k);
            if k > 0 || plan.supervise_first_set {
                let post = self.template_posterior(class, &known)?;
                for &p in positions {
                    let q: f64 = post.iter().enumerate().map(|(m, w)| w * self.cell_prob(m, p, grid[p])).sum();
                    nll -= q.ln();
                }
            }
            known.extend(positions.iter().map(|&p| (p, grid[p])));
        }
        Ok(nll)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let src: Self = serde_json::from_str(s)?;
        src.validate()?;
        Ok(src)
    }
}

/// Grid number `index` with cell 0 as the least significant base-`vocab` digit.
pub fn grid_from_index(mut index: usize, vocab: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let d = index % vocab;
            index /= vocab;
            d
        })
        .collect()
}

pub fn index_of_grid(grid: &[usize], vocab: usize) -> usize {
    grid.iter().rev().fold(0, |acc, &t| acc * vocab + t)
}

fn table_size(vocab: usize, n: usize) -> Result<usize> {
    let mut size: usize = 1;
    for _ in 0..n {
        size = size
            .checked_mul(vocab)
            .filter(|&s| s <= MAX_ENUMERATION)
            .ok_or_else(|| SarError::Infeasible(format!("vocab^N = {vocab}^{n} exceeds {MAX_ENUMERATION}")))?;
    }
    Ok(size)
}

/// Probability of every grid under a model and plan, indexed by
/// [`index_of_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub vocab: usize,
    pub n: usize,
    /// Chain-rule products as computed, before normalization.
    pub probs: Vec<f64>,
}

impl JointTable {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let z = self.total();
        self.probs.iter().map(|p| p / z).collect()
    }
}

/// Evaluates the set-factorized model distribution on every grid.
pub fn model_joint_enumeration(model: &Fmt, plan: &SetPlan, class: usize) -> Result<JointTable> {
    if !plan.supervise_first_set {
        return Err(SarError::Contract("a plan with an unsupervised first set defines no joint".into()));
    }
    let n = model.config.seq_len();
    let vocab = model.config.vocab;
    let size = table_size(vocab, n)?;
    let masks = crate::masks::gen_masks(&plan.intervals)?;
    let probs = (0..size)
        .map(|i| {
            let grid = grid_from_index(i, vocab, n);
            crate::inference::grid_log_prob(model, plan, &masks, class, &grid).map(f64::exp)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(JointTable { vocab, n, probs })
}

/// The source distribution of `class` on every grid.
pub fn source_joint_enumeration(source: &PatternMixtureSource, class: usize) -> Result<JointTable> {
    let n = source.shape.len();
    let size = table_size(source.vocab, n)?;
    let probs = (0..size)
        .map(|i| source.true_joint_logprob(&grid_from_index(i, source.vocab, n), class).map(f64::exp))
        .collect::<Result<Vec<f64>>>()?;
    Ok(JointTable { vocab: source.vocab, n, probs })
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn write_jsonl(path: &Path, grids: &[TokenGrid]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for g in grids {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TokenGrid>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
