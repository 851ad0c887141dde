//! Sequence orders, output-interval schedules and the rearrange/scatter pair
//! that moves tokens between grid layout and causal (ordered) layout.

use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SarError::InvalidShape {
                height,
                width,
                reason: "both sides must be at least 1",
            });
        }
        Ok(Self { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    /// Number of tokens on the grid.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` of a row-major grid index.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    Raster,
    ReversedRaster,
    Roll,
    ReversedRoll,
    FixedRandom,
    Random,
    NextScale,
    Custom,
}

impl OrderKind {
    pub fn name(&self) -> &'static str {
        match self {
            OrderKind::Raster => "raster",
            OrderKind::ReversedRaster => "reversed_raster",
            OrderKind::Roll => "roll",
            OrderKind::ReversedRoll => "reversed_roll",
            OrderKind::FixedRandom => "fixed_random",
            OrderKind::Random => "random",
            OrderKind::NextScale => "next_scale",
            OrderKind::Custom => "custom",
        }
    }
}

/// A visiting order over grid positions: `perm[t]` is the grid index emitted
/// at causal step `t`, and `inv` maps a grid index back to its step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceOrder {
    perm: Vec<usize>,
    inv: Vec<usize>,
    kind: OrderKind,
    seed: Option<u64>,
}

impl SequenceOrder {
    pub fn from_perm(kind: OrderKind, perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut inv = vec![usize::MAX; n];
        for (t, &p) in perm.iter().enumerate() {
            if p >= n {
                return Err(SarError::OutOfRange { index: p, limit: n });
            }
            if inv[p] != usize::MAX {
                return Err(SarError::Contract(format!(
                    "grid index {p} appears twice in order"
                )));
            }
            inv[p] = t;
        }
        Ok(Self {
            perm,
            inv,
            kind,
            seed: None,
        })
    }

    fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    pub fn kind(&self) -> OrderKind {
        self.kind
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// The same positions visited back to front.
    pub fn reversed(&self) -> Self {
        let perm: Vec<usize> = self.perm.iter().rev().copied().collect();
        let kind = match self.kind {
            OrderKind::Raster => OrderKind::ReversedRaster,
            OrderKind::ReversedRaster => OrderKind::Raster,
            OrderKind::Roll => OrderKind::ReversedRoll,
            OrderKind::ReversedRoll => OrderKind::Roll,
            _ => OrderKind::Custom,
        };
        Self::from_perm(kind, perm).expect("reversal of a permutation is a permutation")
    }
}

pub fn raster_order(shape: GridShape) -> SequenceOrder {
    SequenceOrder::from_perm(OrderKind::Raster, (0..shape.len()).collect())
        .expect("identity is a permutation")
}

pub fn reversed_raster_order(shape: GridShape) -> SequenceOrder {
    SequenceOrder::from_perm(OrderKind::ReversedRaster, (0..shape.len()).rev().collect())
        .expect("reversal is a permutation")
}

/// Clockwise spiral from the top-left corner inward ("Swiss roll").
/// `reversed` walks the same spiral from the center outward.
pub fn roll_order(shape: GridShape, reversed: bool) -> SequenceOrder {
    let (h, w) = (shape.height as isize, shape.width as isize);
    let mut perm = Vec::with_capacity(shape.len());
    let (mut top, mut bottom, mut left, mut right) = (0isize, h - 1, 0isize, w - 1);
    while top <= bottom && left <= right {
        for c in left..=right {
            perm.push((top * w + c) as usize);
        }
        for r in top + 1..=bottom {
            perm.push((r * w + right) as usize);
        }
        if top < bottom {
            for c in (left..right).rev() {
                perm.push((bottom * w + c) as usize);
            }
        }
        if left < right {
            for r in (top + 1..bottom).rev() {
                perm.push((r * w + left) as usize);
            }
        }
        top += 1;
        bottom -= 1;
        left += 1;
        right -= 1;
    }
    let order =
        SequenceOrder::from_perm(OrderKind::Roll, perm).expect("spiral visits each cell once");
    if reversed {
        order.reversed()
    } else {
        order
    }
}

/// Uniformly random permutation drawn from `rng`.
pub fn random_order<R: Rng + ?Sized>(shape: GridShape, rng: &mut R) -> SequenceOrder {
    let mut perm: Vec<usize> = (0..shape.len()).collect();
    perm.shuffle(rng);
    SequenceOrder::from_perm(OrderKind::Random, perm).expect("shuffle is a permutation")
}

/// A random order that is reproducible from `seed` alone.
pub fn seeded_random_order(shape: GridShape, kind: OrderKind, seed: u64) -> SequenceOrder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = random_order(shape, &mut rng).with_seed(seed);
    order.kind = kind;
    order
}

/// The order drawn once and kept fixed for a whole training run.
pub fn fixed_random_order(shape: GridShape, seed: u64) -> SequenceOrder {
    seeded_random_order(shape, OrderKind::FixedRandom, seed)
}

/// Output interval sizes `n_1..n_K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputIntervals {
    sizes: Vec<usize>,
}

impl OutputIntervals {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(SarError::Infeasible("at least one set is required".into()));
        }
        Ok(Self { sizes })
    }

    /// `K` sets of one token each: the classical next-token layout.
    pub fn ones(n: usize) -> Self {
        Self { sizes: vec![1; n] }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_sets(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn last(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    /// Start offset of each set in the causal sequence (length K + 1, last entry = N).
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.sizes.len() + 1);
        out.push(0);
        for &s in &self.sizes {
            acc += s;
            out.push(acc);
        }
        out
    }

    /// Causal index range of the 0-based set `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.sizes[..k].iter().sum();
        start..start + self.sizes[k]
    }

    /// 0-based set id of every causal position.
    pub fn set_of_position(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
            .collect()
    }
}

/// Cosine schedule: set `i` receives `round(N (cos(pi/2 (i-1)/K) - cos(pi/2 i/K)))`
/// tokens, clamped to at least one; the tail absorbs the rounding residue.
pub fn cosine_intervals(n: usize, k: usize) -> Result<OutputIntervals> {
    if k == 0 || k > n {
        return Err(SarError::Infeasible(format!(
            "cosine schedule needs 1 <= K <= N, got K={k}, N={n}"
        )));
    }
    let mut sizes: Vec<usize> = cosine_raw_sizes(n, k).into_iter().map(|s| s.max(1)).collect();
    let total: usize = sizes.iter().sum();
    if total < n {
        *sizes.last_mut().expect("k >= 1") += n - total;
    } else {
        // Clamping can overshoot; trim from the tail without going below one.
        let mut excess = total - n;
        for s in sizes.iter_mut().rev() {
            if excess == 0 {
                break;
            }
            let take = (*s - 1).min(excess);
            *s -= take;
            excess -= take;
        }
    }
    Ok(OutputIntervals { sizes })
}

/// Rounded cosine increments before clamping and residue adjustment.
pub fn cosine_raw_sizes(n: usize, k: usize) -> Vec<usize> {
    (1..=k)
        .map(|i| {
            let a = (FRAC_PI_2 * (i - 1) as f64 / k as f64).cos();
            let b = (FRAC_PI_2 * i as f64 / k as f64).cos();
            // round half up; the difference is non-negative on [0, pi/2]
            (n as f64 * (a - b) + 0.5).floor().max(0.0) as usize
        })
        .collect()
}

/// Random schedule: `K - 1` cut points drawn uniformly from `0..=N`, sorted.
/// Equal cut points produce empty sets, which are kept.
pub fn random_intervals<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<OutputIntervals> {
    if k == 0 || k > n + 1 {
        return Err(SarError::Infeasible(format!(
            "random schedule needs 1 <= K <= N + 1, got K={k}, N={n}"
        )));
    }
    if k > n {
        log::warn!("random schedule with K={k} > N={n} always yields an empty set");
    }
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.gen_range(0..=n)).collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts {
        sizes.push(c - prev);
        prev = c;
    }
    sizes.push(n - prev);
    Ok(OutputIntervals { sizes })
}

/// An order plus its set partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPlan {
    pub order: SequenceOrder,
    pub intervals: OutputIntervals,
    /// `false` only for masked-modeling plans, where the leading set is context.
    pub supervise_first_set: bool,
}

impl SetPlan {
    pub fn new(
        order: SequenceOrder,
        intervals: OutputIntervals,
        supervise_first_set: bool,
    ) -> Result<Self> {
        if intervals.total() != order.len() {
            return Err(SarError::LengthMismatch {
                expected: order.len(),
                actual: intervals.total(),
            });
        }
        if !supervise_first_set && intervals.num_sets() < 2 {
            return Err(SarError::Contract(
                "an unsupervised first set needs at least one output set after it".into(),
            ));
        }
        Ok(Self {
            order,
            intervals,
            supervise_first_set,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn num_sets(&self) -> usize {
        self.intervals.num_sets()
    }

    /// Grid positions of the 0-based set `k`, in causal order.
    pub fn set_positions(&self, k: usize) -> &[usize] {
        &self.order.perm()[self.intervals.range(k)]
    }

    /// Loss weight per causal row: 0 for the unsupervised leading set.
    pub fn row_weights(&self) -> Vec<f32> {
        let first = self.intervals.sizes()[0];
        (0..self.len())
            .map(|t| {
                if !self.supervise_first_set && t < first {
                    0.0
                } else {
                    1.0
                }
            })
            .collect()
    }

    pub fn to_document(&self, shape: GridShape) -> PlanDocument {
        let kind = self.order.kind();
        let reproducible = match kind {
            OrderKind::Random | OrderKind::FixedRandom => self.order.seed().is_some(),
            OrderKind::Custom => false,
            _ => true,
        };
        PlanDocument {
            order_kind: kind,
            seed: self.order.seed(),
            height: shape.height,
            width: shape.width,
            intervals: self.intervals.sizes().to_vec(),
            supervise_first_set: self.supervise_first_set,
            perm: if reproducible {
                None
            } else {
                Some(self.order.perm().to_vec())
            },
        }
    }

    pub fn from_document(doc: &PlanDocument) -> Result<(GridShape, SetPlan)> {
        let shape = GridShape::new(doc.height, doc.width)?;
        let order = match (&doc.perm, doc.order_kind) {
            (Some(perm), kind) => SequenceOrder::from_perm(kind, perm.clone())?,
            (None, OrderKind::Raster) => raster_order(shape),
            (None, OrderKind::ReversedRaster) => reversed_raster_order(shape),
            (None, OrderKind::Roll) => roll_order(shape, false),
            (None, OrderKind::ReversedRoll) => roll_order(shape, true),
            (None, OrderKind::NextScale) => next_scale_plan(shape)?.order,
            (None, kind @ (OrderKind::Random | OrderKind::FixedRandom)) => {
                let seed = doc.seed.ok_or_else(|| {
                    SarError::Config(format!("order kind {} needs a seed or perm", kind.name()))
                })?;
                seeded_random_order(shape, kind, seed)
            }
            (None, OrderKind::Custom) => {
                return Err(SarError::Config("custom order requires an explicit perm".into()))
            }
        };
        let order = match doc.seed {
            Some(s) if order.seed.is_none() => order.with_seed(s),
            _ => order,
        };
        let plan = SetPlan::new(
            order,
            OutputIntervals::new(doc.intervals.clone())?,
            doc.supervise_first_set,
        )?;
        Ok((shape, plan))
    }
}

/// JSON form of a [`SetPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub order_kind: OrderKind,
    pub seed: Option<u64>,
    pub height: usize,
    pub width: usize,
    pub intervals: Vec<usize>,
    pub supervise_first_set: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perm: Option<Vec<usize>>,
}

/// Coarse-to-fine order: nearest-neighbour samples of a 1x1, 2x2, 4x4, ...
/// downsampling (each at half the side of the grid), then everything left.
pub fn next_scale_plan(shape: GridShape) -> Result<SetPlan> {
    let side = shape.height;
    if shape.height != shape.width || !side.is_power_of_two() || side < 4 {
        return Err(SarError::InvalidShape {
            height: shape.height,
            width: shape.width,
            reason: "next-scale needs a square grid with side 2^m, m >= 2",
        });
    }
    let mut taken = vec![false; shape.len()];
    let mut perm = Vec::with_capacity(shape.len());
    let mut sizes = Vec::new();
    let mut scaled = 1;
    while scaled < side {
        let factor = side / scaled;
        let coord = |j: usize| ((j as f64 + 0.5) * factor as f64).floor() as usize;
        let mut count = 0;
        for r in 0..scaled {
            for c in 0..scaled {
                let idx = shape.index(coord(r), coord(c));
                if !taken[idx] {
                    taken[idx] = true;
                    perm.push(idx);
                    count += 1;
                }
            }
        }
        sizes.push(count);
        scaled *= 2;
    }
    let rest: Vec<usize> = (0..shape.len()).filter(|&i| !taken[i]).collect();
    sizes.push(rest.len());
    perm.extend(rest);
    let order = SequenceOrder::from_perm(OrderKind::NextScale, perm)?;
    SetPlan::new(order, OutputIntervals::new(sizes)?, true)
}

/// Masked-modeling plan: random order, a masking ratio `r ~ U[low, high]`,
/// `round(r N)` masked (supervised) tokens after the unsupervised visible set.
pub fn mar_plan<R: Rng + ?Sized>(
    shape: GridShape,
    ratio_low: f64,
    ratio_high: f64,
    rng: &mut R,
) -> Result<SetPlan> {
    if !(ratio_low > 0.0 && ratio_low <= ratio_high && ratio_high <= 1.0) {
        return Err(SarError::Config(format!(
            "masking ratio range must satisfy 0 < low <= high <= 1, got [{ratio_low}, {ratio_high}]"
        )));
    }
    let ratio = if ratio_low == ratio_high {
        ratio_low
    } else {
        rng.gen_range(ratio_low..=ratio_high)
    };
    let order = random_order(shape, rng);
    mar_plan_with_ratio(order, ratio)
}

pub fn mar_plan_with_ratio(order: SequenceOrder, ratio: f64) -> Result<SetPlan> {
    let n = order.len();
    let masked = ((ratio * n as f64).round() as usize).clamp(1, n);
    SetPlan::new(order, OutputIntervals::new(vec![n - masked, masked])?, false)
}

/// `out[t] = grid[perm[t]]`.
pub fn rearrange<T: Copy>(grid: &[T], order: &SequenceOrder) -> Result<Vec<T>> {
    if grid.len() != order.len() {
        return Err(SarError::LengthMismatch {
            expected: order.len(),
            actual: grid.len(),
        });
    }
    Ok(order.perm().iter().map(|&p| grid[p]).collect())
}

/// Writes the tokens of 0-based set `set_index` to their grid positions.
pub fn scatter<T: Copy>(
    grid: &mut [T],
    new_tokens: &[T],
    order: &SequenceOrder,
    intervals: &OutputIntervals,
    set_index: usize,
) -> Result<()> {
    if grid.len() != order.len() {
        return Err(SarError::LengthMismatch {
            expected: order.len(),
            actual: grid.len(),
        });
    }
    if set_index >= intervals.num_sets() {
        return Err(SarError::OutOfRange {
            index: set_index,
            limit: intervals.num_sets(),
        });
    }
    let range = intervals.range(set_index);
    if new_tokens.len() != range.len() {
        return Err(SarError::LengthMismatch {
            expected: range.len(),
            actual: new_tokens.len(),
        });
    }
    for (&tok, &pos) in new_tokens.iter().zip(&order.perm()[range]) {
        grid[pos] = tok;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(h: usize, w: usize) -> GridShape {
        GridShape::new(h, w).unwrap()
    }

    #[test]
    fn raster_and_reversed() {
        assert_eq!(raster_order(shape(2, 2)).perm(), &[0, 1, 2, 3]);
        assert_eq!(raster_order(shape(1, 4)).perm(), &[0, 1, 2, 3]);
        assert_eq!(raster_order(shape(8, 8)).perm(), (0..64).collect::<Vec<_>>());
        assert_eq!(reversed_raster_order(shape(2, 2)).perm(), &[3, 2, 1, 0]);
        assert_eq!(reversed_raster_order(shape(1, 3)).perm(), &[2, 1, 0]);
        let s = shape(3, 5);
        assert_eq!(raster_order(s).reversed().perm(), reversed_raster_order(s).perm());
    }

    #[test]
    fn spiral_small_grids() {
        assert_eq!(roll_order(shape(2, 2), false).perm(), &[0, 1, 3, 2]);
        assert_eq!(
            roll_order(shape(3, 3), false).perm(),
            &[0, 1, 2, 5, 8, 7, 6, 3, 4]
        );
        assert_eq!(
            roll_order(shape(3, 3), true).perm(),
            &[4, 3, 6, 7, 8, 5, 2, 1, 0]
        );
        assert_eq!(roll_order(shape(3, 3), true).kind(), OrderKind::ReversedRoll);
        // non-square and degenerate shapes still cover the grid
        for (h, w) in [(1, 5), (5, 1), (2, 7), (4, 3)] {
            let mut p = roll_order(shape(h, w), false).perm().to_vec();
            p.sort_unstable();
            assert_eq!(p, (0..h * w).collect::<Vec<_>>());
        }
    }

    #[test]
    fn grid_shape_rejects_zero() {
        assert!(GridShape::new(0, 3).is_err());
        assert!(GridShape::new(3, 0).is_err());
    }

    #[test]
    fn random_order_is_seed_deterministic() {
        let s = shape(4, 4);
        let a = fixed_random_order(s, 11);
        let b = fixed_random_order(s, 11);
        assert_eq!(a.perm(), b.perm());
        assert_eq!(a.kind(), OrderKind::FixedRandom);
        for (t, &p) in a.perm().iter().enumerate() {
            assert_eq!(a.inv()[p], t);
        }
    }

    #[test]
    fn from_perm_rejects_non_bijections() {
        assert!(SequenceOrder::from_perm(OrderKind::Custom, vec![0, 0, 1]).is_err());
        assert!(SequenceOrder::from_perm(OrderKind::Custom, vec![0, 3, 1]).is_err());
    }

    #[test]
    fn next_scale_intervals() {
        let p8 = next_scale_plan(shape(8, 8)).unwrap();
        assert_eq!(p8.intervals.sizes(), &[1, 4, 16, 43]);
        assert_eq!(p8.order.perm()[0], 36);
        let p16 = next_scale_plan(shape(16, 16)).unwrap();
        assert_eq!(p16.intervals.sizes(), &[1, 4, 16, 64, 171]);
        assert_eq!(p16.num_sets(), 5);
        assert!(next_scale_plan(shape(2, 2)).is_err());
        assert!(next_scale_plan(shape(6, 6)).is_err());
        assert!(next_scale_plan(shape(8, 4)).is_err());
    }

    #[test]
    fn next_scale_sets_partition_grid() {
        for side in [4, 8, 16, 32] {
            let plan = next_scale_plan(shape(side, side)).unwrap();
            let mut seen = vec![0u8; side * side];
            for k in 0..plan.num_sets() {
                let pos = plan.set_positions(k);
                // raster order inside each set
                assert!(pos.windows(2).all(|w| w[0] < w[1]));
                for &p in pos {
                    seen[p] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "side {side}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_intervals(256, 256).unwrap().sizes(), &[1; 256][..]);
        assert_eq!(cosine_intervals(16, 1).unwrap().sizes(), &[16]);
        assert_eq!(cosine_intervals(16, 4).unwrap().sizes(), &[1, 3, 5, 7]);
        assert!(cosine_intervals(4, 5).is_err());
        assert!(cosine_intervals(4, 0).is_err());
    }

    #[test]
    fn cosine_sums_and_positivity_exhaustive() {
        for n in 1..=256 {
            for k in 1..=n {
                let iv = cosine_intervals(n, k).unwrap();
                assert_eq!(iv.total(), n, "N={n} K={k}");
                assert_eq!(iv.num_sets(), k);
                assert!(iv.sizes().iter().all(|&s| s >= 1), "N={n} K={k}");
                let raw = cosine_raw_sizes(n, k);
                assert!(raw.windows(2).all(|w| w[0] <= w[1]), "N={n} K={k}");
            }
            assert!(cosine_intervals(n, n).unwrap().sizes().iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn random_intervals_basic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(random_intervals(9, 1, &mut rng).unwrap().sizes(), &[9]);
        for n in 1..=64 {
            for k in 1..=n {
                assert_eq!(random_intervals(n, k, &mut rng).unwrap().total(), n);
            }
        }
        assert!(random_intervals(4, 6, &mut rng).is_err());
        assert!(random_intervals(4, 0, &mut rng).is_err());
        assert_eq!(random_intervals(4, 5, &mut rng).unwrap().total(), 4);
    }

    #[test]
    fn random_intervals_first_cut_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[random_intervals(4, 2, &mut rng).unwrap().sizes()[0]] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.2).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn random_order_is_uniform_over_small_perms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = shape(1, 3);
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *counts.entry(random_order(s, &mut rng).perm().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let expected = draws as f64 / 6.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 5 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 20.52, "chi2 = {chi2}");
        for &c in counts.values() {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn mar_plans() {
        let s = shape(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = mar_plan(s, 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(full.intervals.sizes(), &[0, 16]);
        assert!(!full.supervise_first_set);
        let p = mar_plan_with_ratio(raster_order(s), 0.75).unwrap();
        assert_eq!(p.intervals.sizes(), &[4, 12]);
        let floor = (0.7f64 * 16.0).round() as usize;
        for _ in 0..500 {
            let p = mar_plan(s, 0.7, 1.0, &mut rng).unwrap();
            assert!(p.intervals.sizes()[1] >= floor);
            assert_eq!(p.intervals.total(), 16);
        }
        assert!(mar_plan(s, 0.0, 1.0, &mut rng).is_err());
        assert!(mar_plan(s, 0.9, 0.8, &mut rng).is_err());
    }

    #[test]
    fn rearrange_and_scatter() {
        let order = reversed_raster_order(shape(2, 2));
        assert_eq!(rearrange(&[10, 20, 30, 40], &order).unwrap(), vec![40, 30, 20, 10]);
        let raster = raster_order(shape(2, 2));
        assert_eq!(rearrange(&[1, 2, 3, 4], &raster).unwrap(), vec![1, 2, 3, 4]);
        assert!(rearrange(&[1, 2, 3], &raster).is_err());

        // single set: scatter inverts rearrange
        let order = roll_order(shape(2, 3), false);
        let x = [5, 6, 7, 8, 9, 10];
        let causal = rearrange(&x, &order).unwrap();
        let mut out = [0; 6];
        scatter(&mut out, &causal, &order, &OutputIntervals::new(vec![6]).unwrap(), 0).unwrap();
        assert_eq!(out, x);

        // set 0 of [1, 3] touches a single cell
        let iv = OutputIntervals::new(vec![1, 3]).unwrap();
        let mut grid = [0; 4];
        scatter(&mut grid, &[9], &order_4(), &iv, 0).unwrap();
        assert_eq!(grid.iter().filter(|&&v| v != 0).count(), 1);
        assert!(scatter(&mut grid, &[9], &order_4(), &iv, 2).is_err());
        assert!(scatter(&mut grid, &[9, 9], &order_4(), &iv, 0).is_err());
    }

    fn order_4() -> SequenceOrder {
        SequenceOrder::from_perm(OrderKind::Custom, vec![2, 0, 3, 1]).unwrap()
    }

    #[test]
    fn generation_loop_writes_each_cell_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = shape(4, 4);
        for _ in 0..50 {
            let order = random_order(s, &mut rng);
            let iv = random_intervals(16, 5, &mut rng).unwrap();
            let mut writes = [0u32; 16];
            for k in 0..iv.num_sets() {
                for &p in &order.perm()[iv.range(k)] {
                    writes[p] += 1;
                }
            }
            assert!(writes.iter().all(|&w| w == 1));
        }
    }

    #[test]
    fn plan_document_round_trip() {
        let s = shape(4, 4);
        let plans = vec![
            SetPlan::new(raster_order(s), cosine_intervals(16, 4).unwrap(), true).unwrap(),
            SetPlan::new(fixed_random_order(s, 42), OutputIntervals::ones(16), true).unwrap(),
            next_scale_plan(s).unwrap(),
            SetPlan::new(
                SequenceOrder::from_perm(OrderKind::Custom, (0..16).rev().collect()).unwrap(),
                OutputIntervals::new(vec![0, 16]).unwrap(),
                false,
            )
            .unwrap(),
        ];
        for plan in plans {
            let doc = plan.to_document(s);
            let text = serde_json::to_string(&doc).unwrap();
            let back: PlanDocument = serde_json::from_str(&text).unwrap();
            let (s2, p2) = SetPlan::from_document(&back).unwrap();
            assert_eq!(s2, s);
            assert_eq!(p2.order.perm(), plan.order.perm());
            assert_eq!(p2.intervals, plan.intervals);
            assert_eq!(p2.supervise_first_set, plan.supervise_first_set);
        }
    }

    #[test]
    fn plan_validation() {
        let s = shape(2, 2);
        assert!(SetPlan::new(raster_order(s), OutputIntervals::new(vec![1, 2]).unwrap(), true).is_err());
        assert!(SetPlan::new(raster_order(s), OutputIntervals::new(vec![4]).unwrap(), false).is_err());
        let p = SetPlan::new(raster_order(s), OutputIntervals::new(vec![1, 3]).unwrap(), false).unwrap();
        assert_eq!(p.row_weights(), vec![0.0, 1.0, 1.0, 1.0]);
    }
}
