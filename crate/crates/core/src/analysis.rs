//! Diagnostics over recorded token selections: layer-wise selection IoU,
//! token-selection frequency maps, sink/retrieval classification, and the
//! greedy query-aware pruning oracle.

use crate::engine::{start_session, SessionConfig};
use crate::error::{Error, Result};
use crate::model::{MediaInput, Model};
use crate::sparsity::SparsityConfig;

// ── Selection records ───────────────────────────────────────────────────────

/// Per-layer active-set indices recorded for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub label: String,
    pub per_layer: Vec<Vec<usize>>,
    pub n_visual: usize,
}

impl SelectionRecord {
    /// All tokens this query selected in any layer.
    fn union(&self) -> Vec<bool> {
        let mut hit = vec![false; self.n_visual];
        for layer in &self.per_layer {
            for &i in layer {
                hit[i] = true;
            }
        }
        hit
    }
}

fn iou(a: &[usize], b: &[usize]) -> f64 {
    // Both ascending; merge-count the intersection.
    let mut i = 0;
    let mut j = 0;
    let mut inter = 0usize;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise selection IoU per layer, plus the mean off-diagonal summary.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `per_layer[l][a][b]` = IoU of query a's and query b's layer-l sets.
    pub per_layer: Vec<Vec<Vec<f64>>>,
    pub mean_off_diagonal: Vec<f64>,
}

pub fn selection_iou(records: &[SelectionRecord]) -> Result<IouReport> {
    if records.len() < 2 {
        return Err(Error::Invalid("selection IoU needs at least 2 queries".into()));
    }
    let n_layers = records[0].per_layer.len();
    for r in records {
        if r.per_layer.len() != n_layers {
            return Err(Error::Invalid("records disagree on layer count".into()));
        }
        for (a, b) in r.per_layer.iter().zip(&records[0].per_layer) {
            if a.len() != b.len() {
                return Err(Error::Invalid("records disagree on selection budget".into()));
            }
        }
    }
    let q = records.len();
    let mut per_layer = Vec::with_capacity(n_layers);
    let mut mean_off = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut m = vec![vec![0.0; q]; q];
        let mut sum = 0.0;
        for a in 0..q {
            for b in 0..q {
                let v = iou(&records[a].per_layer[l], &records[b].per_layer[l]);
                m[a][b] = v;
                if a != b {
                    sum += v;
                }
            }
        }
        mean_off.push(sum / (q * q - q) as f64);
        per_layer.push(m);
    }
    Ok(IouReport { per_layer, mean_off_diagonal: mean_off })
}

/// How often each visual token is selected, counted over every layer of
/// every record.
pub fn selection_frequency(records: &[SelectionRecord]) -> Vec<usize> {
    let n = records.iter().map(|r| r.n_visual).max().unwrap_or(0);
    let mut counts = vec![0usize; n];
    for r in records {
        for layer in &r.per_layer {
            for &i in layer {
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Tokens split into persistent sinks (selected for at least a θ fraction of
/// queries, layers aggregated by union) and query-dependent retrieval tokens
/// (selected at least once but below the sink threshold).
#[derive(Debug, Clone, PartialEq)]
pub struct SinkClasses {
    pub sinks: Vec<usize>,
    pub retrieval: Vec<usize>,
    pub threshold: f64,
}

pub fn classify_sinks(records: &[SelectionRecord], theta: f64) -> Result<SinkClasses> {
    if records.len() < 2 {
        return Err(Error::Invalid("sink classification needs at least 2 queries".into()));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Invalid(format!("theta {theta} outside (0, 1]")));
    }
    let n = records.iter().map(|r| r.n_visual).max().unwrap_or(0);
    let mut hits = vec![0usize; n];
    for r in records {
        for (i, hit) in r.union().iter().enumerate() {
            if *hit {
                hits[i] += 1;
            }
        }
    }
    let q = records.len() as f64;
    let mut sinks = Vec::new();
    let mut retrieval = Vec::new();
    for (i, &h) in hits.iter().enumerate() {
        if h == 0 {
            continue;
        }
        if h as f64 / q >= theta {
            sinks.push(i);
        } else {
            retrieval.push(i);
        }
    }
    Ok(SinkClasses { sinks, retrieval, threshold: theta })
}

// ── Greedy query-aware oracle ───────────────────────────────────────────────

/// Greedy pruning-oracle result: the selected token set in selection order,
/// and the recorded agreement curve (best-so-far envelope, one entry per
/// budget from 0 to k).
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOracleResult {
    pub selected: Vec<usize>,
    pub curve: Vec<f64>,
    pub dense_answer: Vec<u32>,
}

/// Exact-match fraction over answer positions up to the shorter length;
/// two empty answers agree fully.
pub fn agreement(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return if a.is_empty() && b.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / n as f64
}

fn answer_with_keep(
    model: &Model,
    media: &MediaInput,
    base_cfg: &SessionConfig,
    keep: &[usize],
    question: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    // The oracle prunes at the embedding level and decodes densely.
    let mut cfg = base_cfg.clone();
    cfg.sparsity = SparsityConfig::dense();
    let mut session = start_session(model, cfg);
    session.prefill_media_with_keep(media, keep)?;
    session.ask(question, max_new)
}

/// Greedily grow a visual-token keep set of size `k`, at each step adding
/// the single token whose inclusion maximizes agreement with the dense
/// model's greedy answer (ties to the lower index). Pruning is irreversible
/// and happens before the decoder prefill; costs O(k · n_visual) full runs,
/// so desk-scale sizes only.
pub fn greedy_oracle(
    model: &Model,
    media: &MediaInput,
    base_cfg: &SessionConfig,
    question: &[u32],
    k: usize,
    max_new: usize,
) -> Result<GreedyOracleResult> {
    let n = media.n_visual();
    if k > n {
        return Err(Error::Invalid(format!("oracle budget {k} exceeds {n} visual tokens")));
    }
    let all: Vec<usize> = (0..n).collect();
    let dense_answer = answer_with_keep(model, media, base_cfg, &all, question, max_new)?;

    let mut selected: Vec<usize> = Vec::new();
    let mut member = vec![false; n];
    let baseline = agreement(
        &answer_with_keep(model, media, base_cfg, &[], question, max_new)?,
        &dense_answer,
    );
    let mut curve = vec![baseline];
    let mut best_so_far = baseline;

    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for cand in 0..n {
            if member[cand] {
                continue;
            }
            let mut keep: Vec<usize> = selected.iter().copied().chain([cand]).collect();
            keep.sort_unstable();
            let ans = answer_with_keep(model, media, base_cfg, &keep, question, max_new)?;
            let score = agreement(&ans, &dense_answer);
            let better = match best {
                None => true,
                Some((s, i)) => score > s || (score == s && cand < i),
            };
            if better {
                best = Some((score, cand));
            }
        }
        let (score, winner) = best.expect("k <= n leaves at least one candidate");
        member[winner] = true;
        selected.push(winner);
        best_so_far = best_so_far.max(score);
        curve.push(best_so_far);
    }
    Ok(GreedyOracleResult { selected, curve, dense_answer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn rec(label: &str, sets: Vec<Vec<usize>>, n: usize) -> SelectionRecord {
        SelectionRecord { label: label.into(), per_layer: sets, n_visual: n }
    }

    #[test]
    fn iou_basics() {
        let a = rec("a", vec![vec![1, 2, 3]], 8);
        let b = rec("b", vec![vec![2, 3, 4]], 8);
        let r = selection_iou(&[a.clone(), b]).unwrap();
        assert_eq!(r.per_layer[0][0][0], 1.0);
        assert_eq!(r.per_layer[0][0][1], 0.5);
        assert_eq!(r.per_layer[0][1][0], 0.5);
        assert_eq!(r.mean_off_diagonal[0], 0.5);
        let c = rec("c", vec![vec![1, 2, 3]], 8);
        let d = rec("d", vec![vec![4, 5, 6]], 8);
        let r2 = selection_iou(&[c, d]).unwrap();
        assert_eq!(r2.per_layer[0][0][1], 0.0);
    }

    #[test]
    fn iou_budget_mismatch_rejected() {
        let a = rec("a", vec![vec![1, 2]], 8);
        let b = rec("b", vec![vec![2]], 8);
        assert!(selection_iou(&[a, b]).is_err());
    }

    #[test]
    fn frequency_counts() {
        let a = rec("a", vec![vec![0, 2], vec![0, 3]], 4);
        let b = rec("b", vec![vec![0, 1], vec![0, 2]], 4);
        let counts = selection_frequency(&[a.clone(), b.clone()]);
        assert_eq!(counts, vec![4, 1, 2, 1]);
        let total: usize = counts.iter().sum();
        let expect: usize = [&a, &b]
            .iter()
            .flat_map(|r| r.per_layer.iter())
            .map(Vec::len)
            .sum();
        assert_eq!(total, expect);
    }

    #[test]
    fn sink_classification() {
        // 4 queries; token 0 in all, token 1 in one, token 2 in two, token 3 never.
        let records: Vec<SelectionRecord> = (0..4)
            .map(|q| {
                let mut set = vec![0usize];
                if q == 1 {
                    set.push(1);
                }
                if q < 2 {
                    set.push(2);
                }
                set.sort_unstable();
                rec(&format!("q{q}"), vec![set], 4)
            })
            .collect();
        let c = classify_sinks(&records, 0.5).unwrap();
        assert_eq!(c.sinks, vec![0, 2]);
        assert_eq!(c.retrieval, vec![1]);
        let strict = classify_sinks(&records, 1.0).unwrap();
        assert_eq!(strict.sinks, vec![0]);
        assert_eq!(strict.retrieval, vec![1, 2]);
        // Partition: no overlap, no omission of selected-at-least-once.
        for c in [&c, &strict] {
            let mut all: Vec<usize> = c.sinks.iter().chain(&c.retrieval).copied().collect();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2]);
        }
    }

    #[test]
    fn agreement_edges() {
        assert_eq!(agreement(&[], &[]), 1.0);
        assert_eq!(agreement(&[1], &[]), 0.0);
        assert_eq!(agreement(&[1, 2, 3], &[1, 9, 3]), 2.0 / 3.0);
        assert_eq!(agreement(&[1, 2], &[1, 2, 3]), 1.0);
    }

    #[test]
    fn oracle_picks_the_single_informative_token_first() {
        use crate::niah::{gen_niah, NiahSpec};
        // One planted needle among haystack noise: the dense answer is the
        // needle's readout, and only the needle token can produce it, so the
        // oracle must select it at step one.
        let mut spec = NiahSpec::new(4, 2, 9);
        spec.needles = 1;
        spec.depths = 1;
        spec.queries = vec![0];
        let bundle = gen_niah(&spec).unwrap();
        let case = &bundle.cases[0];
        let mut cfg = SessionConfig::new(SparsityConfig::dense());
        cfg.system_ids = Vec::new();
        cfg.eos_id = u32::MAX;
        let r = greedy_oracle(
            &bundle.model,
            &case.media,
            &cfg,
            &[spec.query_token(0)],
            2,
            1,
        )
        .unwrap();
        assert_eq!(r.dense_answer, vec![spec.readout_token(0)]);
        assert_eq!(r.selected[0], case.needle_rows[0]);
        assert_eq!(r.curve[1], 1.0);
    }

    #[test]
    fn oracle_full_budget_perfect_agreement() {
        let mut mcfg = ModelConfig::small();
        mcfg.seed = 40;
        let model = build_model(&mcfg).unwrap();
        let media = MediaInput::from_grid(1, 2, 2, mcfg.d_model, 17);
        let cfg = SessionConfig::new(SparsityConfig::dense());
        let r = greedy_oracle(&model, &media, &cfg, &[5, 6], 4, 4).unwrap();
        assert_eq!(r.curve.len(), 5);
        assert_eq!(*r.curve.last().unwrap(), 1.0);
        for w in r.curve.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(r.selected.len(), 4);
    }
}
