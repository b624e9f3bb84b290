//! Segmented per-layer KV store with round tagging, partial eviction,
//! position bookkeeping, and contiguous active packing.
//!
//! Entries are append-ordered and every layer holds the same entry count.
//! Keys are kept twice per layer: pre-rotation (for positional remapping)
//! and post-rotation (what attention actually reads). Only the post-RoPE
//! keys and the values count toward the byte model; the pre-RoPE copies are
//! desk-scale bookkeeping.

use crate::error::{Error, Result};
use crate::rope::Position;

// ── Tags ────────────────────────────────────────────────────────────────────

/// What a cache entry is: system prompt, visual token, question token, or
/// generated answer token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    System,
    Visual,
    Query,
    Answer,
}

impl SegmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            SegmentKind::System => "system",
            SegmentKind::Visual => "visual",
            SegmentKind::Query => "query",
            SegmentKind::Answer => "answer",
        }
    }
}

/// Entry tag: the segment kind plus the conversation round it belongs to
/// (0 for system and visual entries, which outlive rounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentTag {
    pub kind: SegmentKind,
    pub round_id: u32,
}

impl SegmentTag {
    pub fn new(kind: SegmentKind, round_id: u32) -> Self {
        debug_assert!(
            !matches!(kind, SegmentKind::System | SegmentKind::Visual) || round_id == 0,
            "system/visual entries carry round 0"
        );
        Self { kind, round_id }
    }

    pub fn system() -> Self {
        Self { kind: SegmentKind::System, round_id: 0 }
    }

    pub fn visual() -> Self {
        Self { kind: SegmentKind::Visual, round_id: 0 }
    }
}

// ── Cache ───────────────────────────────────────────────────────────────────

/// One entry's rows for one layer: (pre-RoPE key, post-RoPE key, value).
pub type KvRows = (Vec<f64>, Vec<f64>, Vec<f64>);

/// One decoder layer's stored rows. Each entry is a row of
/// `n_kv_heads * d_head` floats per matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStore {
    pub k_pre: Vec<Vec<f64>>,
    pub k_post: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl LayerStore {
    fn new() -> Self {
        Self { k_pre: Vec::new(), k_post: Vec::new(), v: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.k_post.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_post.is_empty()
    }
}

/// Per-entry metadata, shared across layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryMeta {
    pub tag: SegmentTag,
    pub position: Position,
}

/// Segmented KV cache over all decoder layers of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedKVCache {
    layers: Vec<LayerStore>,
    meta: Vec<EntryMeta>,
    n_kv_heads: usize,
    d_head: usize,
    unified: bool,
    next_position: i64,
    /// Bumped on any mutation that could invalidate packed views.
    generation: u64,
}

impl SegmentedKVCache {
    pub fn new(n_layers: usize, n_kv_heads: usize, d_head: usize, unified: bool) -> Self {
        Self {
            layers: (0..n_layers).map(|_| LayerStore::new()).collect(),
            meta: Vec::new(),
            n_kv_heads,
            d_head,
            unified,
            next_position: 0,
            generation: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[EntryMeta] {
        &self.meta
    }

    pub fn layer(&self, l: usize) -> &LayerStore {
        &self.layers[l]
    }

    pub fn next_position(&self) -> i64 {
        self.next_position
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn kv_row_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Indices (into the entry list) of all visual entries, ascending.
    pub fn visual_indices(&self) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.tag.kind == SegmentKind::Visual)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_kind(&self, kind: SegmentKind) -> usize {
        self.meta.iter().filter(|m| m.tag.kind == kind).count()
    }

    fn check_position(&self, pos: Position) -> Result<()> {
        if self.unified {
            let p = match pos {
                Position::Scalar(p) => p,
                Position::Grid { .. } => {
                    return Err(Error::Invalid(
                        "grid positions are not valid in unified mode".into(),
                    ))
                }
            };
            if p < self.next_position {
                return Err(Error::PositionRegression { last: self.next_position - 1, got: p });
            }
        }
        Ok(())
    }

    fn advance_position(&mut self, pos: Position) {
        self.next_position = self.next_position.max(pos.max_coord() + 1);
    }

    /// Check that a position sequence could be appended right now: in unified
    /// mode all positions must be scalar and non-regressing. Leaves the cache
    /// untouched, so callers can validate before committing anything.
    pub fn validate_append_positions(&self, positions: &[Position]) -> Result<()> {
        if !self.unified {
            return Ok(());
        }
        let mut last = self.next_position;
        for &pos in positions {
            let p = match pos {
                Position::Scalar(p) => p,
                Position::Grid { .. } => {
                    return Err(Error::Invalid(
                        "grid positions are not valid in unified mode".into(),
                    ))
                }
            };
            if p < last {
                return Err(Error::PositionRegression { last: last - 1, got: p });
            }
            last = p + 1;
        }
        Ok(())
    }

    /// Append one entry's metadata after validating position monotonicity.
    /// Row data for each layer is pushed separately with [`push_layer_row`];
    /// the per-layer counts must match `len()` again once a chunk completes.
    pub fn push_meta(&mut self, tag: SegmentTag, position: Position) -> Result<()> {
        self.check_position(position)?;
        self.meta.push(EntryMeta { tag, position });
        self.advance_position(position);
        self.generation += 1;
        Ok(())
    }

    /// Append one entry's rows for a single layer.
    pub fn push_layer_row(&mut self, layer: usize, k_pre: Vec<f64>, k_post: Vec<f64>, v: Vec<f64>) {
        debug_assert_eq!(k_pre.len(), self.kv_row_width());
        debug_assert_eq!(k_post.len(), self.kv_row_width());
        debug_assert_eq!(v.len(), self.kv_row_width());
        let store = &mut self.layers[layer];
        store.k_pre.push(k_pre);
        store.k_post.push(k_post);
        store.v.push(v);
    }

    /// Append a segment of entries across all layers at once.
    /// `rows[l]` holds `(k_pre, k_post, v)` triples for layer `l`, one per
    /// entry; row counts must agree across layers and with `positions`.
    pub fn append_segment(
        &mut self,
        rows: &[Vec<KvRows>],
        tag: SegmentTag,
        positions: &[Position],
    ) -> Result<()> {
        if rows.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "append wants {} layers, got {}",
                self.layers.len(),
                rows.len()
            )));
        }
        let n = positions.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("append row counts differ across layers".into()));
        }
        self.validate_append_positions(positions)?;
        for (i, &pos) in positions.iter().enumerate() {
            self.meta.push(EntryMeta { tag, position: pos });
            self.advance_position(pos);
            for (l, layer_rows) in rows.iter().enumerate() {
                let (kp, ko, v) = layer_rows[i].clone();
                self.push_layer_row(l, kp, ko, v);
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Remove every query/answer entry belonging to `round_id`, in every
    /// layer. With `reclaim_positions`, the next-position counter resets to
    /// one past the highest position among the remaining entries.
    pub fn evict_round(&mut self, round_id: u32, reclaim_positions: bool) -> Result<()> {
        let doomed: Vec<usize> = self
            .meta
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                matches!(m.tag.kind, SegmentKind::Query | SegmentKind::Answer)
                    && m.tag.round_id == round_id
            })
            .map(|(i, _)| i)
            .collect();
        if doomed.is_empty() {
            return Err(Error::UnknownRound(round_id));
        }
        let keep: Vec<bool> = {
            let mut keep = vec![true; self.meta.len()];
            for &i in &doomed {
                keep[i] = false;
            }
            keep
        };
        retain_by_mask(&mut self.meta, &keep);
        for layer in &mut self.layers {
            retain_by_mask(&mut layer.k_pre, &keep);
            retain_by_mask(&mut layer.k_post, &keep);
            retain_by_mask(&mut layer.v, &keep);
        }
        if reclaim_positions {
            self.next_position = self
                .meta
                .iter()
                .map(|m| m.position.max_coord() + 1)
                .max()
                .unwrap_or(0);
        }
        self.generation += 1;
        Ok(())
    }

    /// Build a contiguous view of one layer: all non-visual entries plus the
    /// selected visual entries, in original append order. `active` indexes
    /// into the layer's visual entries (ascending).
    pub fn pack_active(&self, layer: usize, active: &[usize]) -> Result<LayerView> {
        let visual = self.visual_indices();
        let mut last: Option<usize> = None;
        for &a in active {
            if a >= visual.len() {
                return Err(Error::Invalid(format!(
                    "active visual index {a} out of range ({} visual entries)",
                    visual.len()
                )));
            }
            if let Some(prev) = last {
                if a <= prev {
                    return Err(Error::Invalid("active indices must be strictly ascending".into()));
                }
            }
            last = Some(a);
        }
        let active_globals: Vec<usize> = active.iter().map(|&a| visual[a]).collect();
        let mut next_active = active_globals.iter().copied().peekable();
        let mut source = Vec::new();
        for (i, m) in self.meta.iter().enumerate() {
            if m.tag.kind == SegmentKind::Visual {
                if next_active.peek() == Some(&i) {
                    next_active.next();
                    source.push(i);
                }
            } else {
                source.push(i);
            }
        }
        let store = &self.layers[layer];
        let k_post = source.iter().map(|&i| store.k_post[i].clone()).collect();
        let v = source.iter().map(|&i| store.v[i].clone()).collect();
        Ok(LayerView { source, k_post, v })
    }

    /// Byte and count accounting at the stated element width. Only the
    /// attention-visible K and V rows are counted.
    pub fn stats(&self, element_width: usize) -> CacheStats {
        let per_kind = [
            SegmentKind::System,
            SegmentKind::Visual,
            SegmentKind::Query,
            SegmentKind::Answer,
        ]
        .map(|k| (k, self.count_kind(k)));
        let per_layer: Vec<usize> = self.layers.iter().map(LayerStore::len).collect();
        let bytes = self.meta.len()
            * 2
            * self.d_head
            * self.n_kv_heads
            * self.layers.len()
            * element_width;
        CacheStats { per_kind, per_layer, bytes, element_width }
    }

    /// Overwrite the stored keys and position of entry `idx`: used by
    /// positional remapping, which re-rotates pre-RoPE keys at new positions.
    pub fn rewrite_entry(
        &mut self,
        idx: usize,
        position: Position,
        k_post_per_layer: Vec<Vec<f64>>,
    ) {
        debug_assert_eq!(k_post_per_layer.len(), self.layers.len());
        self.meta[idx].position = position;
        for (layer, row) in self.layers.iter_mut().zip(k_post_per_layer) {
            layer.k_post[idx] = row;
        }
        self.generation += 1;
    }

    /// Recompute `next_position` from current entries (after a remap).
    pub fn resync_next_position(&mut self) {
        self.next_position = self
            .meta
            .iter()
            .map(|m| m.position.max_coord() + 1)
            .max()
            .unwrap_or(0);
    }

    /// Exact structural equality of contents: entries, rows, positions, and
    /// the next-position counter. Ignores the mutation counter.
    pub fn state_eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.layers == other.layers
            && self.next_position == other.next_position
    }

    /// FNV-1a hash over every stored bit of the cache contents (rows, tags,
    /// positions, next-position counter). Two caches with equal fingerprints
    /// are bitwise-identical up to the mutation counter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for m in &self.meta {
            eat(&[m.tag.kind as u8]);
            eat(&m.tag.round_id.to_le_bytes());
            match m.position {
                Position::Scalar(p) => {
                    eat(&[0]);
                    eat(&p.to_le_bytes());
                }
                Position::Grid { t, h: hh, w } => {
                    eat(&[1]);
                    eat(&t.to_le_bytes());
                    eat(&hh.to_le_bytes());
                    eat(&w.to_le_bytes());
                }
            }
        }
        for layer in &self.layers {
            for rows in [&layer.k_pre, &layer.k_post, &layer.v] {
                for row in rows {
                    for &v in row {
                        eat(&v.to_le_bytes());
                    }
                }
            }
        }
        eat(&self.next_position.to_le_bytes());
        h
    }
}

fn retain_by_mask<T>(items: &mut Vec<T>, keep: &[bool]) {
    let mut i = 0;
    items.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

// ── Views and stats ─────────────────────────────────────────────────────────

/// Contiguous copied rows of one layer's active entries, with their source
/// entry indices (append order preserved).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerView {
    pub source: Vec<usize>,
    pub k_post: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl LayerView {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Extend the view with an entry just appended to the cache.
    pub fn push(&mut self, source_idx: usize, k_post: Vec<f64>, v: Vec<f64>) {
        self.source.push(source_idx);
        self.k_post.push(k_post);
        self.v.push(v);
    }
}

/// Whole-cache active view: one packed layer view per decoder layer, pinned
/// to the cache generation it was built from.
#[derive(Debug, Clone)]
pub struct ActiveView {
    pub layers: Vec<LayerView>,
    generation: u64,
}

impl ActiveView {
    /// Pack views for every layer from per-layer active visual indices.
    pub fn pack(cache: &SegmentedKVCache, active_per_layer: &[Vec<usize>]) -> Result<Self> {
        if active_per_layer.len() != cache.n_layers() {
            return Err(Error::Shape(format!(
                "active sets for {} layers, cache has {}",
                active_per_layer.len(),
                cache.n_layers()
            )));
        }
        let layers = active_per_layer
            .iter()
            .enumerate()
            .map(|(l, a)| cache.pack_active(l, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, generation: cache.generation() })
    }

    /// Pack a full view (every visual entry active) — the dense case.
    pub fn pack_full(cache: &SegmentedKVCache) -> Result<Self> {
        let all: Vec<usize> = (0..cache.visual_indices().len()).collect();
        let per_layer = vec![all; cache.n_layers()];
        Self::pack(cache, &per_layer)
    }

    pub fn check_fresh(&self, cache: &SegmentedKVCache) -> Result<()> {
        if self.generation != cache.generation() {
            return Err(Error::StaleView);
        }
        Ok(())
    }

    /// Record that the view tracked a cache append it performed itself.
    pub fn track_generation(&mut self, cache: &SegmentedKVCache) {
        self.generation = cache.generation();
    }
}

/// Entry counts and byte accounting for a cache snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheStats {
    pub per_kind: [(SegmentKind, usize); 4],
    pub per_layer: Vec<usize>,
    pub bytes: usize,
    pub element_width: usize,
}

impl CacheStats {
    pub fn total_entries(&self) -> usize {
        self.per_kind.iter().map(|(_, n)| n).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: f64, width: usize) -> Vec<f64> {
        vec![v; width]
    }

    fn seg_rows(
        n_layers: usize,
        width: usize,
        vals: &[f64],
    ) -> Vec<Vec<KvRows>> {
        (0..n_layers)
            .map(|l| {
                vals.iter()
                    .map(|&v| {
                        let base = v + l as f64 * 100.0;
                        (row(base, width), row(base + 0.5, width), row(-base, width))
                    })
                    .collect()
            })
            .collect()
    }

    fn scalars(ps: &[i64]) -> Vec<Position> {
        ps.iter().map(|&p| Position::Scalar(p)).collect()
    }

    #[test]
    fn append_assigns_positions() {
        let mut c = SegmentedKVCache::new(2, 1, 4, true);
        c.append_segment(&seg_rows(2, 4, &[1.0, 2.0, 3.0]), SegmentTag::visual(), &scalars(&[0, 1, 2]))
            .unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.next_position(), 3);
        assert_eq!(c.layer(0).len(), 3);
        assert_eq!(c.layer(1).len(), 3);
        // Query continues from next_position.
        c.append_segment(
            &seg_rows(2, 4, &[4.0]),
            SegmentTag::new(SegmentKind::Query, 1),
            &scalars(&[3]),
        )
        .unwrap();
        assert_eq!(c.next_position(), 4);
    }

    #[test]
    fn position_regression_rejected() {
        let mut c = SegmentedKVCache::new(1, 1, 2, true);
        c.append_segment(&seg_rows(1, 2, &[1.0, 2.0]), SegmentTag::visual(), &scalars(&[0, 1]))
            .unwrap();
        let err = c.append_segment(
            &seg_rows(1, 2, &[3.0]),
            SegmentTag::new(SegmentKind::Query, 1),
            &scalars(&[1]),
        );
        assert!(matches!(err, Err(Error::PositionRegression { .. })));
        // Failed append left the cache untouched.
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn two_appends_equal_one_concatenated() {
        let width = 4;
        let mut a = SegmentedKVCache::new(2, 1, width, true);
        a.append_segment(&seg_rows(2, width, &[1.0, 2.0]), SegmentTag::visual(), &scalars(&[0, 1]))
            .unwrap();
        a.append_segment(&seg_rows(2, width, &[3.0]), SegmentTag::visual(), &scalars(&[2]))
            .unwrap();

        let mut b = SegmentedKVCache::new(2, 1, width, true);
        b.append_segment(
            &seg_rows(2, width, &[1.0, 2.0, 3.0]),
            SegmentTag::visual(),
            &scalars(&[0, 1, 2]),
        )
        .unwrap();
        // Structural equality modulo the mutation counter.
        assert_eq!(a.meta(), b.meta());
        assert_eq!(a.layer(0), b.layer(0));
        assert_eq!(a.layer(1), b.layer(1));
        assert_eq!(a.next_position(), b.next_position());
    }

    #[test]
    fn evict_restores_pre_round_state() {
        let width = 2;
        let mut c = SegmentedKVCache::new(1, 1, width, true);
        c.append_segment(&seg_rows(1, width, &[1.0, 2.0]), SegmentTag::visual(), &scalars(&[0, 1]))
            .unwrap();
        let before = c.clone();
        c.append_segment(
            &seg_rows(1, width, &[5.0]),
            SegmentTag::new(SegmentKind::Query, 1),
            &scalars(&[2]),
        )
        .unwrap();
        c.append_segment(
            &seg_rows(1, width, &[6.0]),
            SegmentTag::new(SegmentKind::Answer, 1),
            &scalars(&[3]),
        )
        .unwrap();
        c.evict_round(1, true).unwrap();
        assert_eq!(c.meta(), before.meta());
        assert_eq!(c.layer(0), before.layer(0));
        assert_eq!(c.next_position(), before.next_position());
    }

    #[test]
    fn evict_unknown_round_errors() {
        let mut c = SegmentedKVCache::new(1, 1, 2, true);
        c.append_segment(&seg_rows(1, 2, &[1.0]), SegmentTag::visual(), &scalars(&[0]))
            .unwrap();
        assert!(matches!(c.evict_round(3, true), Err(Error::UnknownRound(3))));
    }

    #[test]
    fn evict_out_of_order_keeps_later_round_positions() {
        let width = 2;
        let mut c = SegmentedKVCache::new(1, 1, width, true);
        c.append_segment(&seg_rows(1, width, &[1.0]), SegmentTag::visual(), &scalars(&[0]))
            .unwrap();
        c.append_segment(
            &seg_rows(1, width, &[2.0]),
            SegmentTag::new(SegmentKind::Query, 1),
            &scalars(&[1]),
        )
        .unwrap();
        c.append_segment(
            &seg_rows(1, width, &[3.0]),
            SegmentTag::new(SegmentKind::Query, 2),
            &scalars(&[2]),
        )
        .unwrap();
        c.evict_round(1, false).unwrap();
        // Hand-built expectation: visual at 0, round-2 query still at 2.
        assert_eq!(c.len(), 2);
        assert_eq!(c.meta()[1].tag.round_id, 2);
        assert_eq!(c.meta()[1].position, Position::Scalar(2));
        assert_eq!(c.layer(0).k_pre[1], row(3.0, width));
    }

    #[test]
    fn pack_active_subsets() {
        let width = 2;
        let mut c = SegmentedKVCache::new(1, 1, width, true);
        c.append_segment(&seg_rows(1, width, &[9.0]), SegmentTag::system(), &scalars(&[0]))
            .unwrap();
        c.append_segment(
            &seg_rows(1, width, &[1.0, 2.0, 3.0]),
            SegmentTag::visual(),
            &scalars(&[1, 2, 3]),
        )
        .unwrap();
        // All visual active: the full layer.
        let full = c.pack_active(0, &[0, 1, 2]).unwrap();
        assert_eq!(full.source, vec![0, 1, 2, 3]);
        assert_eq!(full.k_post, c.layer(0).k_post);
        // None active: only the system entry.
        let none = c.pack_active(0, &[]).unwrap();
        assert_eq!(none.source, vec![0]);
        // Subset: mask-and-filter oracle.
        let view = c.pack_active(0, &[1]).unwrap();
        let expect: Vec<usize> = c
            .meta()
            .iter()
            .enumerate()
            .filter(|(i, m)| m.tag.kind != SegmentKind::Visual || *i == 2)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(view.source, expect);
        assert!(c.pack_active(0, &[5]).is_err());
    }

    #[test]
    fn stats_arithmetic() {
        let mut c = SegmentedKVCache::new(1, 1, 4, true);
        assert_eq!(c.stats(8).bytes, 0);
        let vals: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let pos: Vec<i64> = (0..10).collect();
        c.append_segment(&seg_rows(1, 4, &vals), SegmentTag::visual(), &scalars(&pos))
            .unwrap();
        // 10 entries * 2 (K,V) * d_head 4 * 1 kv head * 1 layer * 8 bytes.
        assert_eq!(c.stats(8).bytes, 640);
        let s = c.stats(8);
        assert_eq!(s.total_entries(), 10);
        assert_eq!(s.per_layer, vec![10]);
    }

    #[test]
    fn multimodal_cache_accepts_grids_and_tracks_max_coord() {
        let width = 2;
        let mut c = SegmentedKVCache::new(1, 1, width, false);
        let pos = vec![Position::grid(0, 0, 0), Position::grid(0, 1, 2), Position::grid(1, 0, 0)];
        c.append_segment(&seg_rows(1, width, &[1.0, 2.0, 3.0]), SegmentTag::visual(), &pos)
            .unwrap();
        assert_eq!(c.next_position(), 3); // 1 + max coordinate (w = 2)
        // Text continues as scalars past the grid; no regression check in
        // multimodal mode.
        c.append_segment(
            &seg_rows(1, width, &[4.0]),
            SegmentTag::new(SegmentKind::Query, 1),
            &[Position::Scalar(3)],
        )
        .unwrap();
        assert_eq!(c.next_position(), 4);

        // Unified caches reject grid positions outright.
        let mut u = SegmentedKVCache::new(1, 1, width, true);
        assert!(u
            .append_segment(
                &seg_rows(1, width, &[1.0]),
                SegmentTag::visual(),
                &[Position::grid(0, 0, 0)]
            )
            .is_err());
    }

    #[test]
    fn pruning_shrinks_bytes_proportionally() {
        // 16 visual entries vs the 4 kept after 75% pruning: bytes drop to
        // exactly a quarter of dense (direct count).
        let build = |n: usize| {
            let mut c = SegmentedKVCache::new(2, 1, 4, true);
            let vals: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let pos: Vec<i64> = (0..n as i64).collect();
            c.append_segment(&seg_rows(2, 4, &vals), SegmentTag::visual(), &scalars(&pos))
                .unwrap();
            c
        };
        let dense = build(16).stats(8).bytes;
        let pruned = build(4).stats(8).bytes;
        assert_eq!(pruned * 4, dense);
    }

    #[test]
    fn kind_counts_partition_totals() {
        let width = 2;
        let mut c = SegmentedKVCache::new(2, 1, width, true);
        c.append_segment(&seg_rows(2, width, &[0.0]), SegmentTag::system(), &scalars(&[0]))
            .unwrap();
        c.append_segment(&seg_rows(2, width, &[1.0, 2.0]), SegmentTag::visual(), &scalars(&[1, 2]))
            .unwrap();
        c.append_segment(
            &seg_rows(2, width, &[3.0]),
            SegmentTag::new(SegmentKind::Query, 1),
            &scalars(&[3]),
        )
        .unwrap();
        let s = c.stats(8);
        let by_kind: usize = s.per_kind.iter().map(|(_, n)| n).sum();
        assert_eq!(by_kind, c.len());
        for l in 0..2 {
            assert_eq!(c.layer(l).len(), c.len());
        }
    }
}
