//! Deterministic seeded toy VLM: a small bidirectional vision encoder
//! (optionally with summary tokens) feeding a causal decoder with MHA or GQA.
//!
//! Architecture, fixed once and documented here:
//! * Pre-norm blocks: `x += attn(rms(x))`, then `x += mlp(rms(x))`, with
//!   RMS normalization at unit gain (eps 1e-6) and no final norm, so a
//!   zero-layer decoder unembeds its input directly.
//! * MLP is `down(silu(up(x)))` with `d_ff = 4 * d_model`.
//! * The encoder always runs multi-head attention with `n_heads` heads and
//!   no positional encoding; the decoder applies rotary embeddings to Q and
//!   K rows (keys are cached both pre- and post-rotation).
//! * Weights are filled from one xorshift64* stream seeded with the config
//!   seed, in this order: embedding table, summary-token embeddings, encoder
//!   layers (wq, wk, wv, wo, up, down per layer), decoder layers (same
//!   order), unembedding. Every matrix draws uniform [-a, a) row-major with
//!   `a = 1/sqrt(first_dim)`.

use crate::error::{Error, Result};
use crate::kvcache::{ActiveView, SegmentKind, SegmentedKVCache, SegmentTag};
use crate::rng::Rng;
use crate::rope::{rotate_row, Position};
use crate::salience::AttnProbe;
use crate::tensor::{dot, softmax_slice, Tensor};

pub const RMS_EPS: f64 = 1e-6;

// ── Config ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeMode {
    Unified,
    Multimodal,
}

impl RopeMode {
    pub fn name(&self) -> &'static str {
        match self {
            RopeMode::Unified => "unified",
            RopeMode::Multimodal => "multimodal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers_vis: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub summary_tokens: usize,
    pub rope_mode: RopeMode,
    pub theta_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Small default used by tests and the CLI when no config is given.
    pub fn small() -> Self {
        Self {
            n_layers_vis: 2,
            n_layers_dec: 2,
            d_model: 32,
            d_head: 8,
            n_heads: 4,
            n_kv_heads: 2,
            vocab_size: 64,
            summary_tokens: 0,
            rope_mode: RopeMode::Unified,
            theta_base: 10_000.0,
            seed: 0,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_kv_heads {} must divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!("d_head {} must be even", self.d_head)));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.theta_base <= 0.0 {
            return Err(Error::Config("theta_base must be positive".into()));
        }
        Ok(())
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub summary: Tensor,
    pub enc_layers: Vec<LayerWeights>,
    pub dec_layers: Vec<LayerWeights>,
    pub unembed: Tensor,
}

fn fill_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let a = 1.0 / (rows as f64).sqrt();
    rng.fill(&[rows, cols], a)
}

fn fill_layer(rng: &mut Rng, cfg: &ModelConfig, kv_cols: usize) -> LayerWeights {
    let d = cfg.d_model;
    LayerWeights {
        wq: fill_matrix(rng, d, d),
        wk: fill_matrix(rng, d, kv_cols),
        wv: fill_matrix(rng, d, kv_cols),
        wo: fill_matrix(rng, d, d),
        w_up: fill_matrix(rng, d, cfg.d_ff()),
        w_down: fill_matrix(rng, cfg.d_ff(), d),
    }
}

/// Build the model deterministically from its config.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let d = config.d_model;
    let embed = fill_matrix(&mut rng, config.vocab_size, d);
    let summary = if config.summary_tokens > 0 {
        fill_matrix(&mut rng, config.summary_tokens, d)
    } else {
        Tensor::zeros(vec![0, d])
    };
    let enc_layers = (0..config.n_layers_vis)
        .map(|_| fill_layer(&mut rng, config, d))
        .collect();
    let dec_kv_cols = config.n_kv_heads * config.d_head;
    let dec_layers = (0..config.n_layers_dec)
        .map(|_| fill_layer(&mut rng, config, dec_kv_cols))
        .collect();
    let unembed = fill_matrix(&mut rng, d, config.vocab_size);
    Ok(Model { config: config.clone(), embed, summary, enc_layers, dec_layers, unembed })
}

impl Model {
    /// Fresh cache shaped for this model's decoder.
    pub fn new_cache(&self) -> SegmentedKVCache {
        SegmentedKVCache::new(
            self.config.n_layers_dec,
            self.config.n_kv_heads,
            self.config.d_head,
            matches!(self.config.rope_mode, RopeMode::Unified),
        )
    }

    /// Embedding rows for a token-id sequence.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {id} outside vocab of {}",
                    self.config.vocab_size
                )));
            }
            rows.push(self.embed.row(id as usize).to_vec());
        }
        Tensor::from_rows(&rows)
    }

    /// FNV-combined checksum over all weight tensors, in fill order.
    pub fn weight_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for &b in &x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        eat(self.embed.checksum());
        eat(self.summary.checksum());
        for l in self.enc_layers.iter().chain(&self.dec_layers) {
            for t in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down] {
                eat(t.checksum());
            }
        }
        eat(self.unembed.checksum());
        h
    }
}

// ── Shared block math ───────────────────────────────────────────────────────

/// RMS-normalize each row at unit gain.
pub fn rms_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row {
            *v *= inv;
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn mlp(x: &Tensor, l: &LayerWeights) -> Tensor {
    let mut up = x.matmul(&l.w_up).expect("mlp shapes fixed at build");
    for v in up.data_mut() {
        *v = silu(*v);
    }
    up.matmul(&l.w_down).expect("mlp shapes fixed at build")
}

fn add_assign(x: &mut Tensor, y: &Tensor) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

// ── Vision encoder ──────────────────────────────────────────────────────────

/// Visual input: patch embeddings plus their (t, h, w) grid coordinates.
#[derive(Debug, Clone)]
pub struct MediaInput {
    pub patches: Tensor,
    pub grid: Vec<(i64, i64, i64)>,
    pub frames: usize,
}

impl MediaInput {
    /// A full t×h×w grid with seeded uniform patch embeddings in [-0.5, 0.5),
    /// coordinates enumerated row-major (t outer, then h, then w).
    pub fn from_grid(t: usize, h: usize, w: usize, d_model: usize, seed: u64) -> Self {
        let n = t * h * w;
        let patches = Rng::new(seed).fill(&[n, d_model], 0.5);
        let mut grid = Vec::with_capacity(n);
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    grid.push((ti as i64, hi as i64, wi as i64));
                }
            }
        }
        Self { patches, grid, frames: t }
    }

    pub fn n_visual(&self) -> usize {
        self.patches.rows()
    }
}

/// Encoder output: final-layer embeddings for the non-summary tokens, plus
/// per-layer Q/K probes for salience estimation.
#[derive(Debug, Clone)]
pub struct VisionEncoding {
    pub embeddings: Tensor,
    pub probes: Vec<AttnProbe>,
}

impl VisionEncoding {
    /// Probe for the designated salience layer; `None` picks the final one.
    pub fn salience_probe(&self, layer: Option<usize>) -> Result<(&AttnProbe, usize)> {
        let idx = layer.unwrap_or(self.probes.len().saturating_sub(1));
        self.probes
            .get(idx)
            .map(|p| (p, idx))
            .ok_or_else(|| Error::Config(format!("salience layer {idx} out of range")))
    }
}

fn split_heads(x: &Tensor, n_heads: usize, d_head: usize) -> Vec<Tensor> {
    let rows = x.rows();
    (0..n_heads)
        .map(|h| {
            let mut data = Vec::with_capacity(rows * d_head);
            for i in 0..rows {
                data.extend_from_slice(&x.row(i)[h * d_head..(h + 1) * d_head]);
            }
            Tensor::from_vec(vec![rows, d_head], data).expect("head slice shape")
        })
        .collect()
}

/// Run the vision encoder over [summary tokens ∥ patches]. Exposes per-layer
/// Q/K (never materialized probabilities) for the salience module and
/// returns the final embeddings of the non-summary tokens.
///
/// A zero-layer encoder passes patches through unchanged and exposes a
/// single probe whose Q and K are the raw rows (identity projections).
pub fn encode_vision(model: &Model, media: &MediaInput) -> Result<VisionEncoding> {
    let cfg = &model.config;
    if media.n_visual() == 0 {
        return Err(Error::Invalid("media has no visual tokens".into()));
    }
    if media.patches.cols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "patch width {} != d_model {}",
            media.patches.cols(),
            cfg.d_model
        )));
    }
    let n_sum = cfg.summary_tokens;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_sum + media.n_visual());
    for i in 0..n_sum {
        rows.push(model.summary.row(i).to_vec());
    }
    for i in 0..media.n_visual() {
        rows.push(media.patches.row(i).to_vec());
    }
    let mut x = Tensor::from_rows(&rows)?;
    let n = x.rows();
    let scale = 1.0 / (cfg.d_head as f64).sqrt();

    let mut probes = Vec::new();
    for l in &model.enc_layers {
        let xn = rms_rows(&x);
        let q = xn.matmul(&l.wq)?;
        let k = xn.matmul(&l.wk)?;
        let v = xn.matmul(&l.wv)?;
        let q_heads = split_heads(&q, cfg.n_heads, cfg.d_head);
        let k_heads = split_heads(&k, cfg.n_heads, cfg.d_head);
        let v_heads = split_heads(&v, cfg.n_heads, cfg.d_head);
        probes.push(AttnProbe {
            heads: q_heads.iter().cloned().zip(k_heads.iter().cloned()).collect(),
            n_summary: n_sum,
        });

        // Bidirectional attention per head, concatenated back to d_model.
        let mut attn = Tensor::zeros(vec![n, cfg.d_model]);
        let mut logits = vec![0.0; n];
        for h in 0..cfg.n_heads {
            let (qh, kh, vh) = (&q_heads[h], &k_heads[h], &v_heads[h]);
            for i in 0..n {
                for j in 0..n {
                    logits[j] = scale * dot(qh.row(i), kh.row(j));
                }
                softmax_slice(&mut logits);
                let dst = &mut attn.row_mut(i)[h * cfg.d_head..(h + 1) * cfg.d_head];
                for (j, &p) in logits.iter().enumerate() {
                    for (o, &vv) in dst.iter_mut().zip(vh.row(j)) {
                        *o += p * vv;
                    }
                }
            }
        }
        let proj = attn.matmul(&l.wo)?;
        add_assign(&mut x, &proj);
        let m = mlp(&rms_rows(&x), l);
        add_assign(&mut x, &m);
    }

    if model.enc_layers.is_empty() {
        probes.push(AttnProbe {
            heads: split_heads(&x, cfg.n_heads, cfg.d_head)
                .into_iter()
                .map(|h| (h.clone(), h))
                .collect(),
            n_summary: n_sum,
        });
    }

    let embeddings = x.select_rows(&(n_sum..n).collect::<Vec<_>>());
    Ok(VisionEncoding { embeddings, probes })
}

// ── Decoder ─────────────────────────────────────────────────────────────────

/// Per-layer visual attention mass captured during a query chunk's prefill
/// pass. Probabilities are renormalized over the pre-chunk causal prefix and
/// summed over all query rows and all query heads.
#[derive(Debug, Clone)]
pub struct RelevanceCapture {
    pub per_layer: Vec<Vec<f64>>,
    pub visual_entries: Vec<usize>,
}

impl RelevanceCapture {
    fn new(cache: &SegmentedKVCache) -> Self {
        let visual_entries = cache.visual_indices();
        Self {
            per_layer: vec![vec![0.0; visual_entries.len()]; cache.n_layers()],
            visual_entries,
        }
    }
}

struct DecoderPass<'a> {
    model: &'a Model,
    scale: f64,
}

impl<'a> DecoderPass<'a> {
    fn new(model: &'a Model) -> Self {
        Self { model, scale: 1.0 / (model.config.d_head as f64).sqrt() }
    }

    /// Project one layer's Q/K/V for a chunk and rotate Q and K per head at
    /// each row's position.
    fn project(
        &self,
        l: &LayerWeights,
        x: &Tensor,
        positions: &[Position],
    ) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let cfg = &self.model.config;
        let xn = rms_rows(x);
        let mut q = xn.matmul(&l.wq)?;
        let k_pre = xn.matmul(&l.wk)?;
        let v = xn.matmul(&l.wv)?;
        for i in 0..q.rows() {
            let row = q.row_mut(i);
            for h in 0..cfg.n_heads {
                rotate_row(
                    &mut row[h * cfg.d_head..(h + 1) * cfg.d_head],
                    positions[i],
                    cfg.theta_base,
                );
            }
        }
        let mut k_post = k_pre.clone();
        for i in 0..k_post.rows() {
            let row = k_post.row_mut(i);
            for g in 0..cfg.n_kv_heads {
                rotate_row(
                    &mut row[g * cfg.d_head..(g + 1) * cfg.d_head],
                    positions[i],
                    cfg.theta_base,
                );
            }
        }
        Ok((q, k_pre, k_post, v))
    }
}

/// Rotate a single pre-RoPE key row (all KV heads) to a position. Used by
/// positional remapping.
pub fn rotate_key_row(
    k_pre: &[f64],
    position: Position,
    n_kv_heads: usize,
    d_head: usize,
    theta_base: f64,
) -> Vec<f64> {
    let mut out = k_pre.to_vec();
    for g in 0..n_kv_heads {
        crate::rope::rotate_row(&mut out[g * d_head..(g + 1) * d_head], position, theta_base);
    }
    out
}

/// Prefill a chunk of embeddings into the cache under `tag` at explicit
/// positions, running causal attention over (existing cache ∥ new rows).
/// Returns the last row's logits. With `capture`, the same pass accumulates
/// per-layer visual relevance for the query-aware retrieval stage.
pub fn prefill_forward_at(
    model: &Model,
    embeddings: &Tensor,
    positions: &[Position],
    cache: &mut SegmentedKVCache,
    tag: SegmentTag,
    mut capture: Option<&mut RelevanceCapture>,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let rows = embeddings.rows();
    if rows == 0 {
        return Err(Error::Invalid("prefill needs at least one row".into()));
    }
    if embeddings.cols() != cfg.d_model {
        return Err(Error::Shape(format!(
            "embedding width {} != d_model {}",
            embeddings.cols(),
            cfg.d_model
        )));
    }
    if positions.len() != rows {
        return Err(Error::Shape("one position per embedding row required".into()));
    }
    if cache.n_layers() != cfg.n_layers_dec {
        return Err(Error::Shape("cache layer count mismatch".into()));
    }

    let base = cache.len();
    if let Some(c) = capture.as_deref_mut() {
        *c = RelevanceCapture::new(cache);
    }
    // Validate then commit metadata up front; layer rows follow during the
    // pass so each layer's store reaches base+rows exactly once.
    cache.validate_append_positions(positions)?;
    for &p in positions {
        cache.push_meta(tag, p)?;
    }

    let pass = DecoderPass::new(model);
    let mut x = embeddings.clone();
    for (layer_idx, l) in model.dec_layers.iter().enumerate() {
        let (q, k_pre, k_post, v) = pass.project(l, &x, positions)?;
        for i in 0..rows {
            cache.push_layer_row(
                layer_idx,
                k_pre.row(i).to_vec(),
                k_post.row(i).to_vec(),
                v.row(i).to_vec(),
            );
        }
        let store = cache.layer(layer_idx);
        let mut attn = Tensor::zeros(vec![rows, cfg.d_model]);
        let group = cfg.group_size();
        let mut logits: Vec<f64> = Vec::new();
        for i in 0..rows {
            let visible = base + i + 1;
            logits.resize(visible, 0.0);
            for h in 0..cfg.n_heads {
                let g = h / group;
                let qh = &q.row(i)[h * cfg.d_head..(h + 1) * cfg.d_head];
                for (j, z) in logits.iter_mut().enumerate() {
                    let kh = &store.k_post[j][g * cfg.d_head..(g + 1) * cfg.d_head];
                    *z = pass.scale * dot(qh, kh);
                }
                softmax_slice(&mut logits[..visible]);
                let dst = &mut attn.row_mut(i)[h * cfg.d_head..(h + 1) * cfg.d_head];
                for (j, &p) in logits[..visible].iter().enumerate() {
                    let vh = &store.v[j][g * cfg.d_head..(g + 1) * cfg.d_head];
                    for (o, &vv) in dst.iter_mut().zip(vh) {
                        *o += p * vv;
                    }
                }
                if let Some(c) = capture.as_deref_mut() {
                    let pre_mass: f64 = logits[..base].iter().sum();
                    if pre_mass > 0.0 {
                        for (slot, &entry) in c.visual_entries.iter().enumerate() {
                            c.per_layer[layer_idx][slot] += logits[entry] / pre_mass;
                        }
                    }
                }
            }
        }
        let proj = attn.matmul(&l.wo)?;
        add_assign(&mut x, &proj);
        let m = mlp(&rms_rows(&x), l);
        add_assign(&mut x, &m);
    }

    let logits = Tensor::from_vec(vec![1, cfg.d_model], x.row(rows - 1).to_vec())?
        .matmul(&model.unembed)?;
    Ok(logits.data().to_vec())
}

/// Prefill with auto-assigned scalar positions continuing from the cache's
/// next-position counter.
pub fn prefill_forward(
    model: &Model,
    embeddings: &Tensor,
    cache: &mut SegmentedKVCache,
    tag: SegmentTag,
) -> Result<Vec<f64>> {
    let start = cache.next_position();
    let positions: Vec<Position> =
        (0..embeddings.rows() as i64).map(|i| Position::Scalar(start + i)).collect();
    prefill_forward_at(model, embeddings, &positions, cache, tag, None)
}

/// One decode step over an active view: causal attention for a single new
/// token computed only over the view's entries plus the token itself. The
/// token's K/V are appended to the cache under `answer` for the given round
/// (always active: the view is extended in place).
pub fn decode_step(
    model: &Model,
    token_id: u32,
    cache: &mut SegmentedKVCache,
    view: &mut ActiveView,
    round_id: u32,
) -> Result<Vec<f64>> {
    view.check_fresh(cache)?;
    let x = model.embed_tokens(&[token_id])?;
    let pos = Position::Scalar(cache.next_position());
    let new_idx = cache.len();
    cache.push_meta(SegmentTag::new(SegmentKind::Answer, round_id), pos)?;

    let cfg = &model.config;
    let pass = DecoderPass::new(model);
    let group = cfg.group_size();
    let mut row = x;
    for (layer_idx, l) in model.dec_layers.iter().enumerate() {
        let (q, k_pre, k_post, v) = pass.project(l, &row, &[pos])?;
        cache.push_layer_row(
            layer_idx,
            k_pre.row(0).to_vec(),
            k_post.row(0).to_vec(),
            v.row(0).to_vec(),
        );
        let lv = &mut view.layers[layer_idx];
        lv.push(new_idx, k_post.row(0).to_vec(), v.row(0).to_vec());

        let n = lv.len();
        let mut logits = vec![0.0; n];
        let mut attn = Tensor::zeros(vec![1, cfg.d_model]);
        for h in 0..cfg.n_heads {
            let g = h / group;
            let qh = &q.row(0)[h * cfg.d_head..(h + 1) * cfg.d_head];
            for (j, z) in logits.iter_mut().enumerate() {
                let kh = &lv.k_post[j][g * cfg.d_head..(g + 1) * cfg.d_head];
                *z = pass.scale * dot(qh, kh);
            }
            softmax_slice(&mut logits);
            let dst = &mut attn.row_mut(0)[h * cfg.d_head..(h + 1) * cfg.d_head];
            for (j, &p) in logits.iter().enumerate() {
                let vh = &lv.v[j][g * cfg.d_head..(g + 1) * cfg.d_head];
                for (o, &vv) in dst.iter_mut().zip(vh) {
                    *o += p * vv;
                }
            }
        }
        let proj = attn.matmul(&l.wo)?;
        add_assign(&mut row, &proj);
        let m = mlp(&rms_rows(&row), l);
        add_assign(&mut row, &m);
    }
    view.track_generation(cache);
    let logits = row.matmul(&model.unembed)?;
    Ok(logits.data().to_vec())
}

/// Dense reference decode: identical math to [`decode_step`] but attending
/// directly over every cache entry, with no view machinery.
pub fn decode_dense(
    model: &Model,
    token_id: u32,
    cache: &mut SegmentedKVCache,
    round_id: u32,
) -> Result<Vec<f64>> {
    let x = model.embed_tokens(&[token_id])?;
    let positions = [Position::Scalar(cache.next_position())];
    prefill_forward_at(
        model,
        &x,
        &positions,
        cache,
        SegmentTag::new(SegmentKind::Answer, round_id),
        None,
    )
}
