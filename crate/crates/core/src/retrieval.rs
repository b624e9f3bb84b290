//! Query-aware relevance scoring over cached visual entries and per-layer
//! active-set selection.
//!
//! Relevance comes from the same attention pass that prefills the question
//! chunk: for every layer, query row, and query head, the softmax mass over
//! the pre-chunk causal prefix is renormalized to that prefix and the share
//! landing on each visual column is summed. No extra pass over K is made.
//! Selection never evicts — inactive entries stay cached for later rounds.

use crate::error::{Error, Result};
use crate::kvcache::{ActiveView, SegmentedKVCache, SegmentKind, SegmentTag};
use crate::model::{prefill_forward_at, Model, RelevanceCapture};
use crate::rope::Position;
use crate::sparsity::{keep_budget, top_k_indices, SparsityConfig};
use crate::tensor::Tensor;

/// Per-layer relevance of each cached visual entry for one round's query.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceScores {
    pub per_layer: Vec<Vec<f64>>,
    pub round_id: u32,
}

/// Per-layer ascending visual-entry indices active for decoding (non-visual
/// entries are implicitly always active). Uniform budget, per-layer content.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    pub per_layer: Vec<Vec<usize>>,
    pub budget: usize,
}

impl ActiveSet {
    pub fn pack_views(&self, cache: &SegmentedKVCache) -> Result<ActiveView> {
        ActiveView::pack(cache, &self.per_layer)
    }
}

/// Outcome of a query chunk prefill with relevance capture: the scores plus
/// the last query row's logits (the seed for greedy decoding).
#[derive(Debug, Clone)]
pub struct QueryPrefill {
    pub scores: RelevanceScores,
    pub last_logits: Vec<f64>,
}

/// Prefill `query_rows` under segment `query` for `round_id`, capturing the
/// aggregate attention strength between the query rows and the cached visual
/// entries in every decoder layer.
pub fn prefill_query_with_relevance(
    model: &Model,
    query_rows: &Tensor,
    positions: &[Position],
    cache: &mut SegmentedKVCache,
    round_id: u32,
) -> Result<QueryPrefill> {
    if query_rows.rows() == 0 {
        return Err(Error::Invalid("query chunk is empty".into()));
    }
    if cache.visual_indices().is_empty() {
        return Err(Error::NoVisualEntries);
    }
    let mut capture = RelevanceCapture { per_layer: Vec::new(), visual_entries: Vec::new() };
    let last_logits = prefill_forward_at(
        model,
        query_rows,
        positions,
        cache,
        SegmentTag::new(SegmentKind::Query, round_id),
        Some(&mut capture),
    )?;
    Ok(QueryPrefill {
        scores: RelevanceScores { per_layer: capture.per_layer, round_id },
        last_logits,
    })
}

/// Operation-level wrapper returning only the scores, with auto-assigned
/// scalar positions continuing from the cache counter.
pub fn accumulate_relevance(
    model: &Model,
    query_rows: &Tensor,
    cache: &mut SegmentedKVCache,
    round_id: u32,
) -> Result<RelevanceScores> {
    let start = cache.next_position();
    let positions: Vec<Position> =
        (0..query_rows.rows() as i64).map(|i| Position::Scalar(start + i)).collect();
    prefill_query_with_relevance(model, query_rows, &positions, cache, round_id)
        .map(|q| q.scores)
}

/// Select the per-layer active sets: top-k visual entries per layer at
/// `k = keep_budget(n_visual, decode_sparsity)`. Nothing is deleted from
/// the cache.
pub fn select_active(scores: &RelevanceScores, config: &SparsityConfig) -> Result<ActiveSet> {
    let n_visual = scores.per_layer.first().map_or(0, Vec::len);
    let budget = keep_budget(n_visual, config.decode_sparsity)?;
    let per_layer = scores
        .per_layer
        .iter()
        .map(|layer| top_k_indices(layer, budget))
        .collect::<Result<Vec<_>>>()?;
    Ok(ActiveSet { per_layer, budget })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::SegmentTag;
    use crate::model::{build_model, decode_dense, decode_step, encode_vision, prefill_forward,
        MediaInput, ModelConfig};
    use crate::rng::Rng;
    use crate::tensor::{dot, softmax_slice};

    fn prefilled_session(seed: u64) -> (crate::model::Model, SegmentedKVCache) {
        let mut cfg = ModelConfig::small();
        cfg.seed = seed;
        let model = build_model(&cfg).unwrap();
        let mut cache = model.new_cache();
        let media = MediaInput::from_grid(1, 2, 3, cfg.d_model, seed ^ 0xABCD);
        let enc = encode_vision(&model, &media).unwrap();
        prefill_forward(&model, &enc.embeddings, &mut cache, SegmentTag::visual()).unwrap();
        (model, cache)
    }

    #[test]
    fn single_key_softmax_readoff() {
        // One layer, one head, d_head = 1 is below the even-head-dim floor of
        // the full model, so check the formula shape directly: one query row
        // q = [2] against visual keys [2] and [0] gives softmax([4, 0]).
        let mut logits = vec![4.0, 0.0];
        softmax_slice(&mut logits);
        let e4 = 4.0_f64.exp();
        assert!((logits[0] - e4 / (e4 + 1.0)).abs() <= 1e-12);
        assert!((logits[1] - 1.0 / (e4 + 1.0)).abs() <= 1e-12);
        assert!((logits[0] - 0.982).abs() < 1e-3);
        assert!((logits[1] - 0.018).abs() < 1e-3);
    }

    #[test]
    fn relevance_matches_materialized_oracle() {
        let (model, mut cache) = prefilled_session(7);
        let pre_cache = cache.clone();
        let mut rng = Rng::new(991);
        let query = rng.fill(&[3, model.config.d_model], 0.5);
        let scores = accumulate_relevance(&model, &query, &mut cache, 1).unwrap();

        // Oracle: replay the chunk prefill on a copy, materializing the
        // attention probabilities over the pre-chunk prefix per row/head and
        // column-summing visual columns. Uses the raw attention primitive on
        // the stored keys rather than the capture path.
        let mut oracle_cache = pre_cache.clone();
        let base = oracle_cache.len();
        let start = oracle_cache.next_position();
        let positions: Vec<Position> =
            (0..3).map(|i| Position::Scalar(start + i as i64)).collect();
        // Run the same forward to populate per-layer Q values indirectly: we
        // recompute x through the layers exactly as the decoder does.
        let cfg = &model.config;
        let mut x = query.clone();
        let scale = 1.0 / (cfg.d_head as f64).sqrt();
        let mut expect = vec![vec![0.0; pre_cache.visual_indices().len()]; cfg.n_layers_dec];
        for &p in &positions {
            oracle_cache.push_meta(SegmentTag::new(SegmentKind::Query, 1), p).unwrap();
        }
        for (layer_idx, _l) in model.dec_layers.iter().enumerate() {
            // Reuse the model's own projection by calling the internal pass
            // through prefill on a scratch cache is not possible here, so
            // project manually with the same primitives.
            let xn = crate::model::rms_rows(&x);
            let l = &model.dec_layers[layer_idx];
            let mut q = xn.matmul(&l.wq).unwrap();
            let k_pre = xn.matmul(&l.wk).unwrap();
            let v = xn.matmul(&l.wv).unwrap();
            let mut k_post = k_pre.clone();
            for i in 0..3 {
                for h in 0..cfg.n_heads {
                    crate::rope::rotate_row(
                        &mut q.row_mut(i)[h * cfg.d_head..(h + 1) * cfg.d_head],
                        positions[i],
                        cfg.theta_base,
                    );
                }
                for g in 0..cfg.n_kv_heads {
                    crate::rope::rotate_row(
                        &mut k_post.row_mut(i)[g * cfg.d_head..(g + 1) * cfg.d_head],
                        positions[i],
                        cfg.theta_base,
                    );
                }
            }
            for i in 0..3 {
                oracle_cache.push_layer_row(
                    layer_idx,
                    k_pre.row(i).to_vec(),
                    k_post.row(i).to_vec(),
                    v.row(i).to_vec(),
                );
            }
            let store = oracle_cache.layer(layer_idx);
            let group = cfg.group_size();
            let mut attn = Tensor::zeros(vec![3, cfg.d_model]);
            for i in 0..3 {
                let visible = base + i + 1;
                for h in 0..cfg.n_heads {
                    let g = h / group;
                    let qh = &q.row(i)[h * cfg.d_head..(h + 1) * cfg.d_head];
                    let mut logits: Vec<f64> = (0..visible)
                        .map(|j| {
                            scale
                                * dot(qh, &store.k_post[j][g * cfg.d_head..(g + 1) * cfg.d_head])
                        })
                        .collect();
                    softmax_slice(&mut logits);
                    let pre: f64 = logits[..base].iter().sum();
                    for (slot, &entry) in pre_cache.visual_indices().iter().enumerate() {
                        expect[layer_idx][slot] += logits[entry] / pre;
                    }
                    let dst = &mut attn.row_mut(i)[h * cfg.d_head..(h + 1) * cfg.d_head];
                    for (j, &p) in logits.iter().enumerate() {
                        let vh = &store.v[j][g * cfg.d_head..(g + 1) * cfg.d_head];
                        for (o, &vv) in dst.iter_mut().zip(vh) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let proj = attn.matmul(&l.wo).unwrap();
            for (a, &b) in x.data_mut().iter_mut().zip(proj.data()) {
                *a += b;
            }
            let m_in = crate::model::rms_rows(&x);
            let mut up = m_in.matmul(&l.w_up).unwrap();
            for vv in up.data_mut() {
                *vv = *vv / (1.0 + (-*vv).exp());
            }
            let down = up.matmul(&l.w_down).unwrap();
            for (a, &b) in x.data_mut().iter_mut().zip(down.data()) {
                *a += b;
            }
        }
        for l in 0..cfg.n_layers_dec {
            for (got, want) in scores.per_layer[l].iter().zip(&expect[l]) {
                assert!((got - want).abs() <= 1e-9, "layer {l}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn identical_keys_spread_relevance_uniformly() {
        // Identical visual rows with negligible rotation (base large enough
        // that even the lowest pair frequency vanishes) give equal logits
        // everywhere, so each visual entry's score is
        // n_query_rows * n_heads / n_entries.
        let mut cfg = ModelConfig::small();
        cfg.theta_base = 1e48;
        cfg.seed = 17;
        let model = build_model(&cfg).unwrap();
        let mut cache = model.new_cache();
        let one = Rng::new(2).fill(&[1, cfg.d_model], 0.5);
        let rows = Tensor::from_rows(&vec![one.row(0).to_vec(); 4]).unwrap();
        prefill_forward(&model, &rows, &mut cache, SegmentTag::visual()).unwrap();

        let q = Rng::new(3).fill(&[2, cfg.d_model], 0.5);
        let scores = accumulate_relevance(&model, &q, &mut cache, 1).unwrap();
        let expect = 2.0 * cfg.n_heads as f64 / 4.0;
        for layer in &scores.per_layer {
            for &s in layer {
                assert!((s - expect).abs() <= 1e-6, "{s} vs {expect}");
            }
        }
    }

    #[test]
    fn no_visual_entries_rejected() {
        let cfg = ModelConfig::small();
        let model = build_model(&cfg).unwrap();
        let mut cache = model.new_cache();
        let q = Rng::new(1).fill(&[1, cfg.d_model], 0.5);
        assert!(matches!(
            accumulate_relevance(&model, &q, &mut cache, 1),
            Err(Error::NoVisualEntries)
        ));
    }

    #[test]
    fn select_zero_sparsity_keeps_all() {
        let scores = RelevanceScores {
            per_layer: vec![vec![0.5, 0.1, 0.9], vec![0.2, 0.8, 0.3]],
            round_id: 1,
        };
        let set = select_active(&scores, &SparsityConfig::dense()).unwrap();
        assert_eq!(set.per_layer, vec![vec![0, 1, 2], vec![0, 1, 2]]);
    }

    #[test]
    fn per_layer_contents_differ() {
        let scores = RelevanceScores {
            per_layer: vec![vec![0.9, 0.1, 0.2], vec![0.1, 0.2, 0.9]],
            round_id: 1,
        };
        let cfg = SparsityConfig::new(0.0, 0.6).unwrap();
        let set = select_active(&scores, &cfg).unwrap();
        assert_eq!(set.budget, 1);
        assert_eq!(set.per_layer[0], vec![0]);
        assert_eq!(set.per_layer[1], vec![2]);
    }

    #[test]
    fn shift_invariance_of_selection() {
        let base = vec![0.3, 0.9, 0.4, 0.05];
        let shifted: Vec<f64> = base.iter().map(|v| v + 3.0).collect();
        let cfg = SparsityConfig::new(0.0, 0.5).unwrap();
        let a = select_active(
            &RelevanceScores { per_layer: vec![base], round_id: 1 },
            &cfg,
        )
        .unwrap();
        let b = select_active(
            &RelevanceScores { per_layer: vec![shifted], round_id: 1 },
            &cfg,
        )
        .unwrap();
        assert_eq!(a.per_layer, b.per_layer);
    }

    #[test]
    fn selection_leaves_cache_untouched_and_full_view_is_dense() {
        let (model, mut cache) = prefilled_session(3);
        let mut rng = Rng::new(5);
        let query = rng.fill(&[2, model.config.d_model], 0.5);
        let qp = prefill_query_with_relevance(
            &model,
            &query,
            &(0..2)
                .map(|i| Position::Scalar(cache.next_position() + i))
                .collect::<Vec<_>>(),
            &mut cache,
            1,
        )
        .unwrap();
        let visual_before = cache.visual_indices().len();
        let set = select_active(&qp.scores, &SparsityConfig::dense()).unwrap();
        assert_eq!(cache.visual_indices().len(), visual_before);

        // decode through the packed view vs the dense reference: bitwise.
        let mut view = set.pack_views(&cache).unwrap();
        let mut dense_cache = cache.clone();
        let tok = 5u32;
        let sparse = decode_step(&model, tok, &mut cache, &mut view, 1).unwrap();
        let dense = decode_dense(&model, tok, &mut dense_cache, 1).unwrap();
        assert_eq!(sparse, dense);
    }
}
