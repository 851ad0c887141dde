//! Set autoregressive modeling: sequence orders and set schedules,
//! generalized causal masks, the Fully Masked Transformer, training,
//! set-wise generation with a key/value cache, and exact synthetic oracles.

pub mod error;
pub mod fmt;
pub mod inference;
pub mod masks;
pub mod numerics;
pub mod policy;
pub mod schedule;
pub mod synthdata;
pub mod training;

pub use error::{Result, SarError};
