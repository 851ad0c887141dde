use crate::numerics::RopeTable;
use crate::schedule::SequenceOrder;

use super::FmtConfig;

/// Precomputed per-grid-position encodings. Index `N` is the condition slot:
/// zero RoPE angle and an all-zero sine embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTables {
    n: usize,
    half: usize,
    width: usize,
    angles: Vec<f32>,
    cos: Vec<f32>,
    sin: Vec<f32>,
    sine: Vec<f32>,
}

impl PositionTables {
    pub fn new(config: &FmtConfig) -> Self {
        let n = config.seq_len();
        let half = config.head_dim() / 2;
        let quarter = half / 2;
        let width = config.width;
        let mut angles = vec![0.0f32; (n + 1) * half];
        let mut sine = vec![0.0f32; (n + 1) * width];
        let base = config.rope_base as f64;
        for p in 0..n {
            let (row, col) = config.grid.coords(p);
            for j in 0..half {
                let (coord, i) = if j < quarter { (row, j) } else { (col, j - quarter) };
                let freq = base.powf(-(i as f64) / quarter as f64);
                angles[p * half + j] = (coord as f64 * freq) as f32;
            }
            // 2-D sine embedding: first half encodes the row, second the column.
            let axis = width / 2;
            let bands = axis / 2;
            for (a, coord) in [(0, row), (1, col)] {
                for i in 0..bands {
                    let freq = 10_000f64.powf(-(i as f64) / bands as f64);
                    let v = coord as f64 * freq;
                    sine[p * width + a * axis + i] = v.sin() as f32;
                    sine[p * width + a * axis + bands + i] = v.cos() as f32;
                }
            }
        }
        Self {
            n,
            half,
            width,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
            angles,
            sine,
        }
    }

    pub fn null_slot(&self) -> usize {
        self.n
    }

    pub fn half(&self) -> usize {
        self.half
    }

    /// RoPE angles of one position (`head_dim / 2` values).
    pub fn angles(&self, pos: usize) -> &[f32] {
        &self.angles[pos * self.half..(pos + 1) * self.half]
    }

    pub fn cos(&self, pos: usize) -> &[f32] {
        &self.cos[pos * self.half..(pos + 1) * self.half]
    }

    pub fn sin(&self, pos: usize) -> &[f32] {
        &self.sin[pos * self.half..(pos + 1) * self.half]
    }

    pub fn sine(&self, pos: usize) -> &[f32] {
        &self.sine[pos * self.width..(pos + 1) * self.width]
    }

    /// RoPE table whose row `t` belongs to `positions[t]`.
    pub fn rope_table(&self, positions: &[usize]) -> RopeTable {
        let mut cos = Vec::with_capacity(positions.len() * self.half);
        let mut sin = Vec::with_capacity(positions.len() * self.half);
        for &p in positions {
            cos.extend_from_slice(self.cos(p));
            sin.extend_from_slice(self.sin(p));
        }
        RopeTable { cos, sin, half: self.half }
    }

    /// Tables in which position `t` carries the encodings of `perm[t]`; the
    /// condition slot is unchanged.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (t, &p) in perm.iter().enumerate() {
            out.angles[t * self.half..(t + 1) * self.half].copy_from_slice(self.angles(p));
            out.cos[t * self.half..(t + 1) * self.half].copy_from_slice(self.cos(p));
            out.sin[t * self.half..(t + 1) * self.half].copy_from_slice(self.sin(p));
            out.sine[t * self.width..(t + 1) * self.width].copy_from_slice(self.sine(p));
        }
        out
    }

    /// Angle table indexed by causal step: row `t` holds the angles of the
    /// original grid position `perm[t]`.
    pub fn rope_angles_for_order(&self, order: &SequenceOrder) -> Vec<f32> {
        order.perm().iter().flat_map(|&p| self.angles(p).iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{random_order, raster_order, GridShape};
    use rand::SeedableRng;

    fn tables() -> (PositionTables, GridShape) {
        let g = GridShape::new(4, 4).unwrap();
        (PositionTables::new(&FmtConfig::tiny(g, 8, 2)), g)
    }

    #[test]
    fn raster_table_is_unpermuted() {
        let (t, g) = tables();
        let a = t.rope_angles_for_order(&raster_order(g));
        assert_eq!(&a[..], &t.angles[..16 * t.half]);
    }

    #[test]
    fn permuted_order_permutes_rows() {
        let (t, g) = tables();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let o1 = random_order(g, &mut rng);
        let o2 = random_order(g, &mut rng);
        let (a1, a2) = (t.rope_angles_for_order(&o1), t.rope_angles_for_order(&o2));
        let h = t.half;
        for p in 0..16 {
            let (s1, s2) = (o1.inv()[p], o2.inv()[p]);
            assert_eq!(a1[s1 * h..(s1 + 1) * h], a2[s2 * h..(s2 + 1) * h]);
        }
    }

    #[test]
    fn axial_split_and_null_slot() {
        let (t, g) = tables();
        // position (2, 3): the first quarter rotates with the row, the rest with the column
        let a = t.angles(g.index(2, 3));
        assert_eq!(a[0], 2.0);
        assert_eq!(a[t.half / 2], 3.0);
        assert!(t.angles(t.null_slot()).iter().all(|&x| x == 0.0));
        assert!(t.sine(t.null_slot()).iter().all(|&x| x == 0.0));
        assert!(t.sine(0).iter().any(|&x| x != 0.0));
    }
}
