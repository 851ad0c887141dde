//! Plan policies named `(order)-(sets)-(schedule)`, e.g. `raster-256-cosine`
//! or `random-16-random`, plus the whole-string aliases `masked` and
//! `next-scale`.
//!
//! The string is split from the right so multi-word orders such as
//! `reversed-raster` need no quoting.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SarError};
use crate::schedule::{
    cosine_intervals, fixed_random_order, mar_plan, next_scale_plan, random_intervals, random_order,
    raster_order, reversed_raster_order, roll_order, GridShape, OutputIntervals, SequenceOrder, SetPlan,
};

pub const ORDER_NAMES: [&str; 6] = ["raster", "reversed-raster", "roll", "reversed-roll", "random", "fixed-random"];
pub const SCHEDULE_NAMES: [&str; 2] = ["cosine", "random"];
pub const ALIASES: [&str; 2] = ["masked", "next-scale"];

/// Default masking-ratio range of the `masked` alias.
pub const MASK_RATIO: (f64, f64) = (0.7, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderSpec {
    Raster,
    ReversedRaster,
    Roll,
    ReversedRoll,
    Random,
    FixedRandom,
}

impl OrderSpec {
    pub const ALL: [OrderSpec; 6] = [
        OrderSpec::Raster,
        OrderSpec::ReversedRaster,
        OrderSpec::Roll,
        OrderSpec::ReversedRoll,
        OrderSpec::Random,
        OrderSpec::FixedRandom,
    ];

    pub fn name(self) -> &'static str {
        ORDER_NAMES[self as usize]
    }

    /// `fixed_seed` selects the fixed-random order; `rng` feeds `random`.
    pub fn build<R: Rng + ?Sized>(self, shape: GridShape, fixed_seed: u64, rng: &mut R) -> SequenceOrder {
        match self {
            OrderSpec::Raster => raster_order(shape),
            OrderSpec::ReversedRaster => reversed_raster_order(shape),
            OrderSpec::Roll => roll_order(shape, false),
            OrderSpec::ReversedRoll => roll_order(shape, true),
            OrderSpec::Random => random_order(shape, rng),
            OrderSpec::FixedRandom => fixed_random_order(shape, fixed_seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Random,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        SCHEDULE_NAMES[self as usize]
    }

    pub fn build<R: Rng + ?Sized>(self, n: usize, sets: usize, rng: &mut R) -> Result<OutputIntervals> {
        match self {
            ScheduleKind::Cosine => cosine_intervals(n, sets),
            ScheduleKind::Random => random_intervals(n, sets, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanPolicy {
    Grid { order: OrderSpec, sets: usize, schedule: ScheduleKind },
    Masked,
    NextScale,
}

impl PlanPolicy {
    pub fn new(order: OrderSpec, sets: usize, schedule: ScheduleKind) -> Self {
        PlanPolicy::Grid { order, sets, schedule }
    }

    /// Draws a training plan. Random orders and random schedules are redrawn
    /// on every call; the fixed-random order depends only on `fixed_seed`.
    pub fn sample<R: Rng + ?Sized>(&self, shape: GridShape, fixed_seed: u64, rng: &mut R) -> Result<SetPlan> {
        match *self {
            PlanPolicy::Grid { order, sets, schedule } => {
                let order = order.build(shape, fixed_seed, rng);
                let intervals = schedule.build(shape.len(), sets, rng)?;
                SetPlan::new(order, intervals, true)
            }
            PlanPolicy::Masked => mar_plan(shape, MASK_RATIO.0, MASK_RATIO.1, rng),
            PlanPolicy::NextScale => next_scale_plan(shape),
        }
    }

    /// Draws a generation plan. Masked modeling decodes every token in one
    /// global step over a random order.
    pub fn sample_for_inference<R: Rng + ?Sized>(
        &self,
        shape: GridShape,
        fixed_seed: u64,
        rng: &mut R,
    ) -> Result<SetPlan> {
        match self {
            PlanPolicy::Masked => {
                let order = random_order(shape, rng);
                SetPlan::new(order, OutputIntervals::new(vec![shape.len()])?, true)
            }
            _ => self.sample(shape, fixed_seed, rng),
        }
    }

    /// True when the order changes from one draw to the next.
    pub fn uses_random_order(&self) -> bool {
        matches!(
            self,
            PlanPolicy::Masked | PlanPolicy::Grid { order: OrderSpec::Random, .. }
        )
    }
}

fn vocabulary() -> String {
    format!(
        "expected (order)-(sets)-(schedule) with order in {{{}}}, sets >= 1, schedule in {{{}}}, or one of {{{}}}",
        ORDER_NAMES.join(", "),
        SCHEDULE_NAMES.join(", "),
        ALIASES.join(", ")
    )
}

impl FromStr for PlanPolicy {
    type Err = SarError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "masked" => return Ok(PlanPolicy::Masked),
            "next-scale" => return Ok(PlanPolicy::NextScale),
            _ => {}
        }
        let bad = |why: String| SarError::PlanParse(format!("{why} in {s:?}; {}", vocabulary()));
        let mut parts = s.rsplitn(3, '-');
        let (schedule, sets, order) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(k), Some(o)) => (c, k, o),
            _ => return Err(bad("malformed plan".into())),
        };
        let order = ORDER_NAMES
            .iter()
            .position(|&n| n == order)
            .map(|i| OrderSpec::ALL[i])
            .ok_or_else(|| bad(format!("unknown order {order:?}")))?;
        let schedule = match schedule {
            "cosine" => ScheduleKind::Cosine,
            "random" => ScheduleKind::Random,
            other => return Err(bad(format!("unknown schedule {other:?}"))),
        };
        let sets: usize = sets.parse().map_err(|_| bad(format!("set count {sets:?} is not a number")))?;
        if sets == 0 {
            return Err(bad("set count must be at least 1".into()));
        }
        Ok(PlanPolicy::Grid { order, sets, schedule })
    }
}

impl fmt::Display for PlanPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanPolicy::Grid { order, sets, schedule } => write!(f, "{}-{}-{}", order.name(), sets, schedule.name()),
            PlanPolicy::Masked => f.write_str("masked"),
            PlanPolicy::NextScale => f.write_str("next-scale"),
        }
    }
}

impl Serialize for PlanPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PlanPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
