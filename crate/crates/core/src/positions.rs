//! `(t, h, w)` token positions and factorized 3D rotary embeddings.
//!
//! Target tokens live at virtual time `t = 0`; the `i`-th context image
//! (1-based) lives at `t = i`. Within every image tokens are enumerated in
//! row-major order, so `h` is the row and `w` the column.

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PositionTriplet {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PositionTriplet {
    pub const ORIGIN: Self = Self { t: 0, h: 0, w: 0 };

    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    fn axis(&self, axis: usize) -> f64 {
        match axis {
            0 => self.t as f64,
            1 => self.h as f64,
            _ => self.w as f64,
        }
    }
}

/// Row-major positions for one image at virtual time `t`.
pub fn grid_positions(t: usize, rows: usize, cols: usize) -> Vec<PositionTriplet> {
    (0..rows)
        .flat_map(|h| (0..cols).map(move |w| PositionTriplet { t, h, w }))
        .collect()
}

/// Positions for the target grid followed by each context grid in order.
pub fn assign_positions(
    target_grid: (usize, usize),
    context_grids: &[(usize, usize)],
) -> Vec<PositionTriplet> {
    let mut out = grid_positions(0, target_grid.0, target_grid.1);
    for (i, &(rows, cols)) in context_grids.iter().enumerate() {
        out.extend(grid_positions(i + 1, rows, cols));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub head_dim: usize,
    /// Sub-dimensions rotated by the `t`, `h` and `w` coordinates.
    pub axis_split: [usize; 3],
    pub base_freq: f64,
}

impl RopeConfig {
    /// Default split: virtual time gets roughly an eighth of the head (at
    /// least 2 dims), the remainder is shared between rows and columns.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        let d_t = (((head_dim as f64 / 8.0) / 2.0).round() as usize * 2).max(2);
        let rest = head_dim.saturating_sub(d_t);
        let d_h = rest / 2 / 2 * 2;
        let cfg = Self { head_dim, axis_split: [d_t, d_h, rest - d_h], base_freq: 10_000.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_base(mut self, base_freq: f64) -> Self {
        self.base_freq = base_freq;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.axis_split.iter().any(|&d| d < 2 || d % 2 != 0) {
            return Err(Error::Config(format!(
                "rope axis dims must be even and >= 2, got {:?}",
                self.axis_split
            )));
        }
        if self.axis_split.iter().sum::<usize>() != self.head_dim {
            return Err(Error::Config(format!(
                "rope axis split {:?} does not sum to head_dim {}",
                self.axis_split, self.head_dim
            )));
        }
        if !(self.base_freq > 1.0) {
            return Err(Error::Config(format!("rope base must be > 1, got {}", self.base_freq)));
        }
        Ok(())
    }

    /// Per-pair `(axis, inverse frequency)` across the head dimension.
    fn pair_table(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, &d) in self.axis_split.iter().enumerate() {
            for i in 0..d / 2 {
                out.push((axis, self.base_freq.powf(-(2.0 * i as f64) / d as f64)));
            }
        }
        out
    }

    /// Precomputes `(cos, sin)` per token and per rotation pair.
    pub fn tables(&self, positions: &[PositionTriplet]) -> RopeTables {
        let pairs = self.pair_table();
        let half = pairs.len();
        let mut cos = vec![0.0; positions.len() * half];
        let mut sin = vec![0.0; positions.len() * half];
        for (n, p) in positions.iter().enumerate() {
            for (j, &(axis, freq)) in pairs.iter().enumerate() {
                let angle = p.axis(axis) * freq;
                cos[n * half + j] = angle.cos();
                sin[n * half + j] = angle.sin();
            }
        }
        RopeTables { half, cos, sin }
    }
}

/// Rotation angles for a fixed sequence of positions.
#[derive(Debug, Clone)]
pub struct RopeTables {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTables {
    pub fn len(&self) -> usize {
        if self.half == 0 {
            0
        } else {
            self.cos.len() / self.half
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rotates every head of `x` (tokens x (heads * head_dim)) in place.
    /// `inverse` applies the transpose rotation, which is the backward pass.
    pub fn apply(&self, x: &mut ArrayViewMut2<f64>, inverse: bool) {
        let head_dim = self.half * 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (n, mut row) in x.rows_mut().into_iter().enumerate() {
            let cos = &self.cos[n * self.half..(n + 1) * self.half];
            let sin = &self.sin[n * self.half..(n + 1) * self.half];
            let row = row.as_slice_mut().expect("contiguous rows");
            for head in row.chunks_exact_mut(head_dim) {
                for j in 0..self.half {
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    let (c, s) = (cos[j], sign * sin[j]);
                    head[2 * j] = a * c - b * s;
                    head[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Applies the 3D rotary embedding to a `tokens x (heads * head_dim)` matrix.
pub fn rope_rotate(
    x: ArrayView2<f64>,
    positions: &[PositionTriplet],
    cfg: &RopeConfig,
) -> Result<ndarray::Array2<f64>> {
    cfg.validate()?;
    if x.ncols() % cfg.head_dim != 0 {
        return Err(Error::ShapeMismatch { left: vec![x.ncols()], right: vec![cfg.head_dim] });
    }
    if x.nrows() != positions.len() {
        return Err(Error::ShapeMismatch { left: vec![x.nrows()], right: vec![positions.len()] });
    }
    let mut out = x.as_standard_layout().into_owned();
    cfg.tables(positions).apply(&mut out.view_mut(), false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn target_only_is_row_major() {
        let p = assign_positions((2, 2), &[]);
        let expect: Vec<_> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(h, w)| PositionTriplet::new(0, h, w))
            .collect();
        assert_eq!(p, expect);
    }

    #[test]
    fn contexts_get_increasing_virtual_time() {
        let p = assign_positions((1, 1), &[(1, 1), (1, 1)]);
        assert_eq!(p.iter().map(|p| p.t).collect::<Vec<_>>(), vec![0, 1, 2]);

        let p = assign_positions((1, 1), &[(2, 3)]);
        assert_eq!(p.len(), 7);
        assert!(p[1..].iter().all(|q| q.t == 1 && q.h < 2 && q.w < 3));
        // context keeps the same spatial layout it would have as a target
        let as_target: Vec<_> = grid_positions(0, 2, 3).iter().map(|q| (q.h, q.w)).collect();
        let as_context: Vec<_> = p[1..].iter().map(|q| (q.h, q.w)).collect();
        assert_eq!(as_target, as_context);
    }

    #[test]
    fn default_split() {
        assert_eq!(RopeConfig::for_head_dim(64).unwrap().axis_split, [8, 28, 28]);
        assert_eq!(RopeConfig::for_head_dim(32).unwrap().axis_split, [4, 14, 14]);
        assert_eq!(RopeConfig::for_head_dim(16).unwrap().axis_split, [2, 6, 8]);
        assert!(RopeConfig::for_head_dim(4).is_err());
        let bad = RopeConfig { head_dim: 16, axis_split: [3, 5, 8], base_freq: 100.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn origin_is_identity() {
        let cfg = RopeConfig::for_head_dim(16).unwrap();
        let x = random(3, 32, 1);
        let y = rope_rotate(x.view(), &[PositionTriplet::ORIGIN; 3], &cfg).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn preserves_norm_and_inverts() {
        let cfg = RopeConfig::for_head_dim(16).unwrap();
        let x = random(4, 16, 2);
        let pos = vec![
            PositionTriplet::new(1, 2, 3),
            PositionTriplet::new(0, 5, 0),
            PositionTriplet::new(2, 0, 7),
            PositionTriplet::new(3, 3, 3),
        ];
        let y = rope_rotate(x.view(), &pos, &cfg).unwrap();
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            assert!((a.dot(&a).sqrt() - b.dot(&b).sqrt()).abs() < 1e-12);
        }
        let mut back = y.clone();
        cfg.tables(&pos).apply(&mut back.view_mut(), true);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_position_invariance_per_axis() {
        let cfg = RopeConfig::for_head_dim(16).unwrap();
        let q = random(1, 16, 3);
        let k = random(1, 16, 4);
        let u = PositionTriplet::new(1, 2, 3);
        let v = PositionTriplet::new(0, 4, 1);
        let dot = |u: PositionTriplet, v: PositionTriplet| {
            let a = rope_rotate(q.view(), &[u], &cfg).unwrap();
            let b = rope_rotate(k.view(), &[v], &cfg).unwrap();
            a.row(0).dot(&b.row(0))
        };
        let base = dot(u, v);
        for delta in [PositionTriplet::new(3, 0, 0), PositionTriplet::new(0, 5, 0), PositionTriplet::new(0, 0, 2)] {
            let shift = |p: PositionTriplet| PositionTriplet::new(p.t + delta.t, p.h + delta.h, p.w + delta.w);
            assert!((dot(shift(u), shift(v)) - base).abs() < 1e-10);
        }
    }

    #[test]
    fn dim_mismatch_errors() {
        let cfg = RopeConfig::for_head_dim(16).unwrap();
        assert!(rope_rotate(random(2, 12, 5).view(), &[PositionTriplet::ORIGIN; 2], &cfg).is_err());
        assert!(rope_rotate(random(2, 16, 5).view(), &[PositionTriplet::ORIGIN; 3], &cfg).is_err());
    }
}
