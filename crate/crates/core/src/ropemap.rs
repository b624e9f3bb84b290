//! Positional remapping after pruning: contiguous re-indexing for unified
//! rotary positions, minimal-grid reconstruction for multimodal (t, h, w)
//! grids, and text-position shifting to keep the modalities collision-free.
//!
//! Remapping is planned once at prefill-prune time. Applying a plan to a
//! cache re-rotates the stored pre-RoPE keys at the new positions rather
//! than composing delta rotations.

use crate::error::{Error, Result};
use crate::kvcache::{SegmentKind, SegmentedKVCache};
use crate::model::{rotate_key_row, Model, RopeMode};
use crate::rope::Position;

/// A planned position rewrite: old position → new position per kept token,
/// plus where text continues afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RemapPlan {
    pub mode: RopeMode,
    pub token_map: Vec<(Position, Position)>,
    /// Per-dimension (t, h, w) coordinate maps for multimodal plans,
    /// strictly increasing in both components.
    pub dim_maps: Option<[Vec<(i64, i64)>; 3]>,
    pub new_text_start: i64,
    pub shift_delta: i64,
}

impl RemapPlan {
    /// Look up a kept token's new position.
    pub fn map(&self, old: Position) -> Option<Position> {
        self.token_map.iter().find(|(o, _)| *o == old).map(|&(_, n)| n)
    }

    pub fn is_identity(&self) -> bool {
        self.shift_delta == 0 && self.token_map.iter().all(|(o, n)| o == n)
    }
}

/// Plan a unified-mode remap: the i-th kept token moves to
/// `visual_start + i`, and text restarts at `visual_start + kept`.
/// `kept_positions` must be ascending and lie in `[visual_start, old_text_start)`.
pub fn remap_unified(
    kept_positions: &[i64],
    visual_start: i64,
    old_text_start: i64,
) -> Result<RemapPlan> {
    let mut last = None;
    for &p in kept_positions {
        if p < visual_start || p >= old_text_start {
            return Err(Error::Invalid(format!(
                "kept position {p} outside visual span [{visual_start}, {old_text_start})"
            )));
        }
        if let Some(prev) = last {
            if p <= prev {
                return Err(Error::Invalid("kept positions must be strictly ascending".into()));
            }
        }
        last = Some(p);
    }
    let token_map = kept_positions
        .iter()
        .enumerate()
        .map(|(i, &p)| (Position::Scalar(p), Position::Scalar(visual_start + i as i64)))
        .collect();
    let new_text_start = visual_start + kept_positions.len() as i64;
    Ok(RemapPlan {
        mode: RopeMode::Unified,
        token_map,
        dim_maps: None,
        new_text_start,
        shift_delta: new_text_start - old_text_start,
    })
}

fn compress_dim(values: impl Iterator<Item = i64>) -> Vec<(i64, i64)> {
    let mut distinct: Vec<i64> = values.collect();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.into_iter().enumerate().map(|(rank, v)| (v, rank as i64)).collect()
}

fn lookup(map: &[(i64, i64)], v: i64) -> i64 {
    map.iter().find(|(old, _)| *old == v).expect("value present by construction").1
}

/// Plan a multimodal remap: each of t, h, w is independently coordinate-
/// compressed (rank of each distinct value, order-preserving), and text
/// continues at `1 + max(t', h', w')` over the kept tokens.
pub fn remap_mrope(kept_coords: &[(i64, i64, i64)], old_text_start: i64) -> Result<RemapPlan> {
    {
        let mut seen = std::collections::HashSet::new();
        for c in kept_coords {
            if !seen.insert(*c) {
                return Err(Error::Invalid(format!("duplicate grid coordinate {c:?}")));
            }
        }
    }
    let t_map = compress_dim(kept_coords.iter().map(|c| c.0));
    let h_map = compress_dim(kept_coords.iter().map(|c| c.1));
    let w_map = compress_dim(kept_coords.iter().map(|c| c.2));
    let token_map: Vec<(Position, Position)> = kept_coords
        .iter()
        .map(|&(t, h, w)| {
            (
                Position::grid(t, h, w),
                Position::grid(lookup(&t_map, t), lookup(&h_map, h), lookup(&w_map, w)),
            )
        })
        .collect();
    let new_text_start = token_map
        .iter()
        .map(|(_, n)| n.max_coord() + 1)
        .max()
        .unwrap_or(0);
    Ok(RemapPlan {
        mode: RopeMode::Multimodal,
        token_map,
        dim_maps: Some([t_map, h_map, w_map]),
        new_text_start,
        shift_delta: new_text_start - old_text_start,
    })
}

/// Shift every position in a plan by a constant base (all dimensions and the
/// text start). Used to place a compressed grid after a system prefix.
pub fn offset_plan(plan: &RemapPlan, base: i64) -> RemapPlan {
    let bump = |p: Position| match p {
        Position::Scalar(v) => Position::Scalar(v + base),
        Position::Grid { t, h, w } => Position::grid(t + base, h + base, w + base),
    };
    RemapPlan {
        mode: plan.mode,
        token_map: plan.token_map.iter().map(|&(o, n)| (o, bump(n))).collect(),
        dim_maps: plan.dim_maps.as_ref().map(|maps| {
            [0, 1, 2].map(|d| maps[d].iter().map(|&(o, n)| (o, n + base)).collect())
        }),
        new_text_start: plan.new_text_start + base,
        shift_delta: plan.shift_delta + base,
    }
}

/// Apply a plan to a cache: visual entries take their mapped positions,
/// query/answer entries shift by the plan's delta, and every touched entry's
/// post-RoPE keys are recomputed from the stored pre-RoPE keys. System
/// entries are untouched.
pub fn apply_remap(model: &Model, cache: &mut SegmentedKVCache, plan: &RemapPlan) -> Result<()> {
    let cfg = &model.config;
    let n_layers = cache.n_layers();
    let mut rewrites: Vec<(usize, Position)> = Vec::new();
    for (idx, meta) in cache.meta().iter().enumerate() {
        match meta.tag.kind {
            SegmentKind::Visual => {
                let new = plan.map(meta.position).ok_or_else(|| {
                    Error::Invalid(format!(
                        "visual entry {idx} at {:?} is not in the remap plan",
                        meta.position
                    ))
                })?;
                rewrites.push((idx, new));
            }
            SegmentKind::Query | SegmentKind::Answer => {
                let new = match meta.position {
                    Position::Scalar(p) => Position::Scalar(p + plan.shift_delta),
                    Position::Grid { t, h, w } => Position::grid(
                        t + plan.shift_delta,
                        h + plan.shift_delta,
                        w + plan.shift_delta,
                    ),
                };
                rewrites.push((idx, new));
            }
            SegmentKind::System => {}
        }
    }
    for (idx, new_pos) in rewrites {
        let rows: Vec<Vec<f64>> = (0..n_layers)
            .map(|l| {
                rotate_key_row(
                    &cache.layer(l).k_pre[idx],
                    new_pos,
                    cfg.n_kv_heads,
                    cfg.d_head,
                    cfg.theta_base,
                )
            })
            .collect();
        cache.rewrite_entry(idx, new_pos, rows);
    }
    cache.resync_next_position();
    Ok(())
}
