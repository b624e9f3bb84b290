//! Rotary position embeddings, unified (scalar positions) and multimodal
//! ((t, h, w) positional grids).
//!
//! The head dimension is split into d/2 pairs. Pair `i` (1-based) rotates by
//! `angle = pos * theta_base^(-2 i / d)`; position 0 is the identity. The
//! 1-based ladder makes the lowest pair's frequency depend on `theta_base`
//! even at d = 2.
//!
//! In multimodal mode the pairs are partitioned into three contiguous bands
//! that read the temporal, height, and width coordinate respectively. Band
//! sizes over the `n = d/2` pairs are fixed at `h = n/4`, `w = n/4`,
//! `t = n - h - w` (the t/h/w split of roughly 1/2, 1/4, 1/4, with integer
//! truncation folded into the temporal band). The frequency ladder stays
//! global: band membership only selects which coordinate supplies `pos`, so
//! a scalar position `p` behaves exactly like the triple `(p, p, p)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── Positions ───────────────────────────────────────────────────────────────

/// A rotary position: a scalar index, or a (t, h, w) grid coordinate.
/// In multimodal mode a scalar `p` is equivalent to the triple `(p, p, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    Scalar(i64),
    Grid { t: i64, h: i64, w: i64 },
}

impl Position {
    pub fn grid(t: i64, h: i64, w: i64) -> Self {
        Position::Grid { t, h, w }
    }

    /// Largest coordinate carried by the position (the scalar itself, or the
    /// max over t/h/w). Drives the `next_position` bookkeeping.
    pub fn max_coord(&self) -> i64 {
        match *self {
            Position::Scalar(p) => p,
            Position::Grid { t, h, w } => t.max(h).max(w),
        }
    }

    fn coord_for_band(&self, band: Band) -> i64 {
        match *self {
            Position::Scalar(p) => p,
            Position::Grid { t, h, w } => match band {
                Band::T => t,
                Band::H => h,
                Band::W => w,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    T,
    H,
    W,
}

/// Pair counts of the three multimodal bands for a head dim `d`.
/// Returns (t, h, w) pair counts summing to d/2.
pub fn band_pair_counts(d_head: usize) -> (usize, usize, usize) {
    let n_pairs = d_head / 2;
    let h = n_pairs / 4;
    let w = n_pairs / 4;
    (n_pairs - h - w, h, w)
}

fn band_of_pair(pair_idx: usize, d_head: usize) -> Band {
    let (t, h, _) = band_pair_counts(d_head);
    if pair_idx < t {
        Band::T
    } else if pair_idx < t + h {
        Band::H
    } else {
        Band::W
    }
}

// ── Rotation ────────────────────────────────────────────────────────────────

/// Frequency of pair `pair_idx` (0-based storage index; the ladder itself is
/// 1-based): `theta_base^(-2 (pair_idx + 1) / d)`.
pub fn pair_frequency(pair_idx: usize, d_head: usize, theta_base: f64) -> f64 {
    theta_base.powf(-2.0 * (pair_idx as f64 + 1.0) / d_head as f64)
}

/// Rotate one head-dim row in place at the given position.
pub fn rotate_row(row: &mut [f64], pos: Position, theta_base: f64) {
    let d = row.len();
    debug_assert!(d % 2 == 0);
    for pair in 0..d / 2 {
        let coord = pos.coord_for_band(band_of_pair(pair, d));
        let angle = coord as f64 * pair_frequency(pair, d, theta_base);
        let (sin, cos) = angle.sin_cos();
        let x = row[2 * pair];
        let y = row[2 * pair + 1];
        row[2 * pair] = x * cos - y * sin;
        row[2 * pair + 1] = x * sin + y * cos;
    }
}

/// Apply rotary embeddings to a matrix of per-head token rows.
/// `positions` must carry one entry per row; head dim must be even.
pub fn rope_apply(x: &Tensor, positions: &[Position], theta_base: f64) -> Result<Tensor> {
    let d = x.cols();
    if d % 2 != 0 {
        return Err(Error::Shape(format!("rope needs an even head dim, got {d}")));
    }
    if positions.len() != x.rows() {
        return Err(Error::Shape(format!(
            "rope positions/rows disagree: {} vs {}",
            positions.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        rotate_row(out.row_mut(i), positions[i], theta_base);
    }
    Ok(out)
}
