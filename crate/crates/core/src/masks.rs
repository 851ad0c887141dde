//! Generalized causal masks: block lower-triangular attention permissions
//! where a block is one output set.
//!
//! Encoder stream layout: `[condition, set 1, .., set K-1]` (the last set is
//! never fed back). Decoder stream layout: `[set 1, .., set K]`, one query
//! row per output token. Set ids are 1-based; the condition has set id 0.

use std::fmt::Write as _;

use crate::error::{Result, SarError};
use crate::schedule::OutputIntervals;

/// Dense row-major boolean matrix; `true` means attention is permitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn is_lower_triangular_with_diagonal(&self) -> bool {
        (0..self.rows).all(|r| (0..self.cols).all(|c| self.get(r, c) == (c <= r)))
    }

    /// One line per row, `#` permitted, `.` masked.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for &b in self.row(r) {
                s.push(if b { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    /// Comma-separated 0/1 rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            for (c, &b) in self.row(r).iter().enumerate() {
                if c > 0 {
                    s.push(',');
                }
                s.push(if b { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskOptions {
    /// Treat the condition and the (unsupervised) first set as one encoder
    /// block. Used for masked-modeling plans.
    pub merge_seen_prefix: bool,
    /// Replace the decoder self-attention mask with full attention.
    pub drop_decoder_self_mask: bool,
}

impl MaskOptions {
    /// Options for a training plan: masked-modeling plans merge the seen prefix.
    pub fn for_training(supervise_first_set: bool, drop_decoder_self_mask: bool) -> Self {
        Self {
            merge_seen_prefix: !supervise_first_set,
            drop_decoder_self_mask: !supervise_first_set && drop_decoder_self_mask,
        }
    }

    pub fn is_block_causal(&self) -> bool {
        !self.merge_seen_prefix && !self.drop_decoder_self_mask
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneralizedCausalMasks {
    /// Encoder self-attention, `L_e x L_e`.
    pub encoder: BoolMatrix,
    /// Decoder self-attention, `N x N`.
    pub decoder_self: BoolMatrix,
    /// Decoder cross-attention, `N x L_e`.
    pub decoder_cross: BoolMatrix,
    /// Set id of each encoder column (condition = 0).
    pub set_of_encoder_pos: Vec<usize>,
    /// Set id of each decoder row (1..=K).
    pub set_of_decoder_pos: Vec<usize>,
    pub options: MaskOptions,
}

impl GeneralizedCausalMasks {
    pub fn encoder_len(&self) -> usize {
        self.set_of_encoder_pos.len()
    }

    pub fn decoder_len(&self) -> usize {
        self.set_of_decoder_pos.len()
    }
}

fn encoder_set_ids(intervals: &OutputIntervals) -> Vec<usize> {
    let k = intervals.num_sets();
    let mut ids = vec![0];
    for (j, &n) in intervals.sizes()[..k - 1].iter().enumerate() {
        ids.extend(std::iter::repeat_n(j + 1, n));
    }
    ids
}

fn decoder_set_ids(intervals: &OutputIntervals) -> Vec<usize> {
    intervals.set_of_position().into_iter().map(|k| k + 1).collect()
}

fn encoder_block(set_id: usize, options: MaskOptions) -> usize {
    if options.merge_seen_prefix && set_id == 1 {
        0
    } else {
        set_id
    }
}

/// Block-causal masks for `intervals`.
pub fn gen_masks(intervals: &OutputIntervals) -> Result<GeneralizedCausalMasks> {
    gen_masks_with(intervals, MaskOptions::default())
}

pub fn gen_masks_with(
    intervals: &OutputIntervals,
    options: MaskOptions,
) -> Result<GeneralizedCausalMasks> {
    if intervals.num_sets() == 0 {
        return Err(SarError::Infeasible("empty interval list".into()));
    }
    let enc = encoder_set_ids(intervals);
    let dec = decoder_set_ids(intervals);
    let encoder = BoolMatrix::from_fn(enc.len(), enc.len(), |r, c| {
        encoder_block(enc[c], options) <= encoder_block(enc[r], options)
    });
    let decoder_self = BoolMatrix::from_fn(dec.len(), dec.len(), |r, c| {
        options.drop_decoder_self_mask || dec[c] <= dec[r]
    });
    let decoder_cross = BoolMatrix::from_fn(dec.len(), enc.len(), |r, c| enc[c] < dec[r]);
    Ok(GeneralizedCausalMasks {
        encoder,
        decoder_self,
        decoder_cross,
        set_of_encoder_pos: enc,
        set_of_decoder_pos: dec,
        options,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSite {
    Encoder,
    DecoderSelf,
    DecoderCross,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskViolation {
    Shape {
        site: MaskSite,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    EmptyRow {
        site: MaskSite,
        row: usize,
    },
    /// A permitted entry that lets a row see a later block.
    Leak {
        site: MaskSite,
        row: usize,
        col: usize,
    },
    /// A masked entry inside the permitted block region.
    Missing {
        site: MaskSite,
        row: usize,
        col: usize,
    },
}

/// Checks `masks` against the block rules implied by `intervals` and the
/// masks' own options. An empty list means the masks are consistent.
pub fn validate_masks(
    masks: &GeneralizedCausalMasks,
    intervals: &OutputIntervals,
) -> Vec<MaskViolation> {
    let options = masks.options;
    let enc = encoder_set_ids(intervals);
    let dec = decoder_set_ids(intervals);
    let mut out = Vec::new();

    let mut check = |site: MaskSite,
                     m: &BoolMatrix,
                     rows: usize,
                     cols: usize,
                     rule: &dyn Fn(usize, usize) -> bool| {
        if (m.rows(), m.cols()) != (rows, cols) {
            out.push(MaskViolation::Shape {
                site,
                expected: (rows, cols),
                actual: (m.rows(), m.cols()),
            });
            return;
        }
        for r in 0..rows {
            if !m.row(r).iter().any(|&b| b) {
                out.push(MaskViolation::EmptyRow { site, row: r });
            }
            for c in 0..cols {
                match (m.get(r, c), rule(r, c)) {
                    (true, false) => out.push(MaskViolation::Leak { site, row: r, col: c }),
                    (false, true) => out.push(MaskViolation::Missing { site, row: r, col: c }),
                    _ => {}
                }
            }
        }
    };

    check(MaskSite::Encoder, &masks.encoder, enc.len(), enc.len(), &|r, c| {
        encoder_block(enc[c], options) <= encoder_block(enc[r], options)
    });
    check(MaskSite::DecoderSelf, &masks.decoder_self, dec.len(), dec.len(), &|r, c| {
        options.drop_decoder_self_mask || dec[c] <= dec[r]
    });
    check(MaskSite::DecoderCross, &masks.decoder_cross, dec.len(), enc.len(), &|r, c| {
        enc[c] < dec[r]
    });
    out
}

/// ASCII dump of all three masks with headers, used by the CLI.
pub fn render_ascii(masks: &GeneralizedCausalMasks) -> String {
    let mut s = String::new();
    for (name, m) in [
        ("encoder_self", &masks.encoder),
        ("decoder_self", &masks.decoder_self),
        ("decoder_cross", &masks.decoder_cross),
    ] {
        let _ = writeln!(s, "# {name} ({}x{})", m.rows(), m.cols());
        s.push_str(&m.to_ascii());
        s.push('\n');
    }
    s
}
