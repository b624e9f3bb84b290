//! Sparsity policy: ratio-to-budget conversion, deterministic top-k selection,
//! and order-preserving packing.

use crate::error::{Error, Result};

/// Prefill and decode keep ratios. Decode sparsity is uniform across all
/// decoder layers; per-layer or head-aware schedules are out of scope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityConfig {
    /// Fraction of visual tokens removed before the LLM, in [0, 1).
    pub prefill_sparsity: f64,
    /// Fraction of cached visual tokens left inactive per decode step, in [0, 1).
    pub decode_sparsity: f64,
}

impl SparsityConfig {
    pub const fn dense() -> Self {
        Self { prefill_sparsity: 0.0, decode_sparsity: 0.0 }
    }

    pub fn new(prefill_sparsity: f64, decode_sparsity: f64) -> Result<Self> {
        check_ratio(prefill_sparsity)?;
        check_ratio(decode_sparsity)?;
        Ok(Self { prefill_sparsity, decode_sparsity })
    }
}

fn check_ratio(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Invalid(format!("sparsity {s} outside [0, 1)")));
    }
    Ok(())
}

/// Tokens to keep out of `n` at the given sparsity: half-up rounding of
/// `n * (1 - sparsity)`, clamped to at least 1 whenever `n > 0`.
pub fn keep_budget(n: usize, sparsity: f64) -> Result<usize> {
    check_ratio(sparsity)?;
    if n == 0 {
        return Ok(0);
    }
    let k = (n as f64 * (1.0 - sparsity) + 0.5).floor() as usize;
    Ok(k.clamp(1, n))
}

/// Indices of the `k` largest scores, ties broken toward the lower index,
/// returned in ascending order. For duplicated values this yields the
/// lexicographically smallest maximum-score set.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Invalid(format!(
            "top-k wants k <= len, got {k} > {}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Pack the kept items contiguously, preserving their original relative
/// order. `keep` must be strictly ascending and in range.
pub fn pack_order<T: Clone>(items: &[T], keep: &[usize]) -> Result<Vec<T>> {
    let mut last: Option<usize> = None;
    for &i in keep {
        if i >= items.len() {
            return Err(Error::Invalid(format!("pack index {i} out of range")));
        }
        if let Some(prev) = last {
            if i <= prev {
                return Err(Error::Invalid("pack indices must be strictly ascending".into()));
            }
        }
        last = Some(i);
    }
    Ok(keep.iter().map(|&i| items[i].clone()).collect())
}
