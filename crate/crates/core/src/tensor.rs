//! Dense row-major tensors and the attention primitives built on them.
//!
//! All acceptance math runs in 64-bit floats. Operations are pure and use
//! fixed left-to-right reduction orders, so identical inputs give bitwise
//! identical outputs on every platform.

use crate::error::{Error, Result};

// ── Tensor ──────────────────────────────────────────────────────────────────

/// Dense row-major array of f64 with shape metadata. Most of the crate works
/// with 2-D tensors (matrices); helpers below assume that where noted.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// 2-D constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self @ other` for 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {k} vs {k2}"
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (l, &av) in a.iter().enumerate() {
                let b = other.row(l);
                for (d, &bv) in dst.iter_mut().zip(b.iter()) {
                    *d += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// Select rows by index, preserving the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), c], data }
    }

    /// FNV-1a hash over the little-endian bit patterns of shape and data.
    /// Stable across platforms; used for golden-weight checksums.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for &d in &self.shape {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            eat(&v.to_le_bytes());
        }
        h
    }
}

/// Dot product with a fixed left-to-right reduction order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

// ── Softmax ─────────────────────────────────────────────────────────────────

/// Numerically stable softmax over a slice, in place: subtracts the max,
/// exponentiates, and normalizes left to right.
pub fn softmax_slice(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

/// Row-wise softmax of a 2-D tensor with per-row max subtraction.
/// Errors on non-finite input.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_slice(out.row_mut(i));
    }
    Ok(out)
}

// ── Attention ───────────────────────────────────────────────────────────────

/// Scaled dot-product attention: `softmax_rows(scale·QKᵀ + mask)·V`.
///
/// When `causal` is set, query rows align to the suffix of the key rows:
/// query row `i` has absolute index `n_k - n_q + i`, and any key with index
/// greater than that absolute index gets a -inf logit before the softmax.
/// `probs` are materialized only when requested (tests and oracles).
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
    scale: f64,
    want_probs: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (n_q, d) = (q.rows(), q.cols());
    let (n_k, d_k) = (k.rows(), k.cols());
    let (n_v, d_v) = (v.rows(), v.cols());
    if d != d_k {
        return Err(Error::Shape(format!("q/k dims disagree: {d} vs {d_k}")));
    }
    if n_k != n_v {
        return Err(Error::Shape(format!("k/v row counts disagree: {n_k} vs {n_v}")));
    }
    if causal && n_q > n_k {
        return Err(Error::Shape(format!(
            "causal attention wants n_q <= n_k, got {n_q} > {n_k}"
        )));
    }

    let mut out = Tensor::zeros(vec![n_q, d_v]);
    let mut probs = if want_probs {
        Some(Tensor::zeros(vec![n_q, n_k]))
    } else {
        None
    };
    let mut logits = vec![0.0; n_k];
    for i in 0..n_q {
        let visible = if causal { n_k - n_q + i + 1 } else { n_k };
        let qi = q.row(i);
        for j in 0..visible {
            logits[j] = scale * dot(qi, k.row(j));
        }
        softmax_slice(&mut logits[..visible]);
        let dst = out.row_mut(i);
        for j in 0..visible {
            let p = logits[j];
            for (o, &vv) in dst.iter_mut().zip(v.row(j)) {
                *o += p * vv;
            }
        }
        if let Some(p) = probs.as_mut() {
            p.row_mut(i)[..visible].copy_from_slice(&logits[..visible]);
        }
    }
    Ok((out, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_fill;

    #[test]
    fn softmax_symmetry() {
        let m = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_analytic() {
        let m = Tensor::from_rows(&[vec![2.0_f64.ln(), 0.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Independent elementwise oracle: exp/sum per row without max shift,
        // evaluated in extended precision by grouping.
        let m = rng_fill(1, &[5, 7], 3.0);
        let s = softmax_rows(&m).unwrap();
        for i in 0..5 {
            let row = m.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..7 {
                let expect = row[j].exp() / denom;
                assert!((s.row(i)[j] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = rng_fill(9, &[8, 13], 20.0);
        let s = softmax_rows(&m).unwrap();
        for i in 0..8 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Tensor::from_rows(&[vec![3.7]]).unwrap();
        let k = Tensor::from_rows(&[vec![-1.2]]).unwrap();
        let v = Tensor::from_rows(&[vec![42.0]]).unwrap();
        let (out, _) = attention(&q, &k, &v, false, 0.123, false).unwrap();
        assert_eq!(out.data(), &[42.0]);
    }

    #[test]
    fn attention_equal_logits_average_values() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0, 0.0], vec![4.0, 6.0]]).unwrap();
        let (out, _) = attention(&q, &k, &v, false, 1.0, false).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-15);
        assert!((out.data()[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_naive_three_loop_oracle() {
        let d = 2;
        let q = rng_fill(7, &[4, d], 1.0);
        let k = rng_fill(8, &[4, d], 1.0);
        let v = rng_fill(9, &[4, d], 1.0);
        let scale = 1.0 / (d as f64).sqrt();
        let (out, probs) = attention(&q, &k, &v, true, scale, true).unwrap();
        let probs = probs.unwrap();

        // Naive oracle: explicit three-loop evaluation with its own masking.
        for i in 0..4 {
            let mut logits = [f64::NEG_INFINITY; 4];
            for j in 0..4 {
                if j <= i {
                    logits[j] = scale * dot(q.row(i), k.row(j));
                }
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += exps[j] / denom * v.row(j)[c];
                }
                assert!((out.row(i)[c] - acc).abs() <= 1e-12);
            }
            let psum: f64 = probs.row(i).iter().sum();
            assert!((psum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_output_is_probs_times_values() {
        let q = rng_fill(3, &[5, 3], 1.0);
        let k = rng_fill(4, &[5, 3], 1.0);
        let v = rng_fill(5, &[5, 3], 1.0);
        let (out, probs) = attention(&q, &k, &v, false, 0.5, true).unwrap();
        let recomposed = probs.unwrap().matmul(&v).unwrap();
        assert_eq!(out.data(), recomposed.data());
    }

    #[test]
    fn attention_rejects_dim_mismatch() {
        let q = Tensor::zeros(vec![1, 2]);
        let k = Tensor::zeros(vec![1, 3]);
        let v = Tensor::zeros(vec![1, 3]);
        assert!(attention(&q, &k, &v, false, 1.0, false).is_err());
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn arb_matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
            (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-50.0..50.0_f64, r * c)
                    .prop_map(move |data| Tensor::from_vec(vec![r, c], data).unwrap())
            })
        }

        proptest! {
            #[test]
            fn softmax_rows_always_sum_to_one(m in arb_matrix(8, 12)) {
                let s = softmax_rows(&m).unwrap();
                for i in 0..s.rows() {
                    let sum: f64 = s.row(i).iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                    prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
                }
            }

            #[test]
            fn attention_probs_rows_sum_to_one(
                q in arb_matrix(6, 4),
                seed in 0u64..1000,
            ) {
                let d = q.cols();
                let n_k = q.rows();
                let mut rng = crate::rng::Rng::new(seed);
                let k = rng.fill(&[n_k, d], 2.0);
                let v = rng.fill(&[n_k, 3], 2.0);
                let (out, probs) =
                    attention(&q, &k, &v, true, 1.0 / (d as f64).sqrt(), true).unwrap();
                let probs = probs.unwrap();
                for i in 0..q.rows() {
                    let sum: f64 = probs.row(i).iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                }
                let recomposed = probs.matmul(&v).unwrap();
                prop_assert_eq!(out.data(), recomposed.data());
            }
        }
    }
}
