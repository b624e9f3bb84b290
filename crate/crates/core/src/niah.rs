//! Synthetic visual needle-in-a-haystack benchmark.
//!
//! A planted toy model makes retrieval exactly analyzable. Needle `i`'s
//! patch embedding is `α·e_{2i} + β·e_{2i+1}`; query token `i` embeds on a
//! dedicated direction `u_i = e_{2n+i}`. The query projection is the partial
//! map `γ·(u_i → e_{2i})` while keys/values stay identity-scaled (zero MLP),
//! so asking query `i` aims attention at needle `i`'s key in every decoder
//! layer with zero logit on the query's own key (q ⊥ k_self), zero on the
//! other needles (distractors), and zero on haystack tokens, which are drawn
//! from the orthogonal complement. The needle's value carries `e_{2i+1}`,
//! which the unembedding reads out as the planted answer id. A very large
//! rotary base makes positional rotations negligible at desk scale, so
//! alignment carries the whole signal at any depth.
//!
//! Sessions run with zero prefill sparsity (the sweep isolates decode-stage
//! retrieval) and one decoded token per query.

use crate::engine::{start_session, SessionConfig};
use crate::error::{Error, Result};
use crate::model::{LayerWeights, MediaInput, Model, ModelConfig, RopeMode};
use crate::rng::Rng;
use crate::sparsity::SparsityConfig;
use crate::tensor::Tensor;

const ALPHA: f64 = 1.0; // needle key component along the query direction
const BETA: f64 = 3.0; // needle value component along the readout direction
const GAMMA: f64 = 1.5; // Q/K projection gain
const HAYSTACK_DIMS: usize = 12;
const DEC_LAYERS: usize = 2;
const THETA_BASE: f64 = 1e12;

// ── Spec and bundle ─────────────────────────────────────────────────────────

/// Haystack geometry and query order for one benchmark bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct NiahSpec {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub needles: usize,
    /// Evenly spaced depth slots the target needle is re-planted at.
    pub depths: usize,
    /// Needle indices to query, in order; defaults to 0..needles.
    pub queries: Vec<usize>,
    pub seed: u64,
}

impl NiahSpec {
    pub fn new(frames: usize, tokens_per_frame: usize, seed: u64) -> Self {
        Self { frames, tokens_per_frame, needles: 5, depths: 5, queries: (0..5).collect(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.needles == 0 || self.frames == 0 || self.tokens_per_frame == 0 || self.depths == 0
        {
            return Err(Error::Config("niah counts must be positive".into()));
        }
        if self.needles > self.frames {
            return Err(Error::Config(format!(
                "{} needles do not fit in {} frames",
                self.needles, self.frames
            )));
        }
        if self.queries.iter().any(|&q| q >= self.needles) {
            return Err(Error::Config("query references a nonexistent needle".into()));
        }
        Ok(())
    }

    pub fn query_token(&self, needle: usize) -> u32 {
        needle as u32
    }

    pub fn readout_token(&self, needle: usize) -> u32 {
        (self.needles + needle) as u32
    }
}

/// One depth placement: the media with needles planted, and each needle's
/// row index within the visual token stream.
#[derive(Debug, Clone)]
pub struct NiahCase {
    pub depth_index: usize,
    pub media: MediaInput,
    pub needle_rows: Vec<usize>,
}

/// A generated benchmark: planted model plus one case per depth.
#[derive(Debug, Clone)]
pub struct NiahBundle {
    pub spec: NiahSpec,
    pub model: Model,
    pub cases: Vec<NiahCase>,
}

fn basis(d: usize, i: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = scale;
    v
}

/// Dimension layout of the planted model: needle pairs, query directions,
/// then the haystack subspace (padded to an even width).
fn planted_d_model(needles: usize) -> usize {
    let d = 3 * needles + HAYSTACK_DIMS;
    d + d % 2
}

/// First haystack dimension; everything from here up is noise space.
fn haystack_start(needles: usize) -> usize {
    3 * needles
}

/// Build the planted model for a needle count: Q projects each query
/// direction onto its needle's key direction, K/V/O are identity-scaled,
/// MLP is zero.
pub fn planted_model(needles: usize) -> Model {
    let d_model = planted_d_model(needles);
    let d_head = 2;
    let config = ModelConfig {
        n_layers_vis: 0,
        n_layers_dec: DEC_LAYERS,
        d_model,
        d_head,
        n_heads: d_model / d_head,
        n_kv_heads: d_model / d_head,
        vocab_size: 2 * needles + 1,
        summary_tokens: 0,
        rope_mode: RopeMode::Unified,
        theta_base: THETA_BASE,
        seed: 0,
    };

    let eye = |scale: f64| {
        let mut t = Tensor::zeros(vec![d_model, d_model]);
        for i in 0..d_model {
            t.row_mut(i)[i] = scale;
        }
        t
    };
    // wq maps u_i = e_{2n+i} onto e_{2i} and annihilates everything else:
    // the query token aims at its needle and not at itself.
    let mut wq = Tensor::zeros(vec![d_model, d_model]);
    for i in 0..needles {
        wq.row_mut(2 * needles + i)[2 * i] = GAMMA;
    }
    let layer = || LayerWeights {
        wq: wq.clone(),
        wk: eye(GAMMA),
        wv: eye(1.0),
        wo: eye(1.0),
        w_up: Tensor::zeros(vec![d_model, 4 * d_model]),
        w_down: Tensor::zeros(vec![4 * d_model, d_model]),
    };

    let mut embed = Tensor::zeros(vec![config.vocab_size, d_model]);
    let mut unembed = Tensor::zeros(vec![d_model, config.vocab_size]);
    for i in 0..needles {
        embed.row_mut(i).copy_from_slice(&basis(d_model, 2 * needles + i, 1.0));
        embed.row_mut(needles + i).copy_from_slice(&basis(d_model, 2 * i + 1, 1.0));
        // Unembedding reads the readout direction back out.
        unembed.row_mut(2 * i + 1)[needles + i] = 1.0;
    }

    Model {
        config,
        embed,
        summary: Tensor::zeros(vec![0, d_model]),
        enc_layers: Vec::new(),
        dec_layers: (0..DEC_LAYERS).map(|_| layer()).collect(),
        unembed,
    }
}

/// Deterministic needle frames for a depth slot: the target sits at the
/// depth anchor, distractors spread at even strides (collisions resolved by
/// probing forward).
fn needle_frames(spec: &NiahSpec, depth_index: usize) -> Vec<usize> {
    let anchor = if spec.depths == 1 {
        0
    } else {
        (spec.frames - 1) * depth_index / (spec.depths - 1)
    };
    let stride = (spec.frames / spec.needles).max(1);
    let mut used = vec![false; spec.frames];
    let mut frames = Vec::with_capacity(spec.needles);
    for i in 0..spec.needles {
        let mut f = (anchor + i * stride) % spec.frames;
        while used[f] {
            f = (f + 1) % spec.frames;
        }
        used[f] = true;
        frames.push(f);
    }
    frames
}

/// Build the benchmark bundle: one media per depth, haystack tokens drawn
/// orthogonally at random, each needle frame carrying one planted token.
pub fn gen_niah(spec: &NiahSpec) -> Result<NiahBundle> {
    spec.validate()?;
    let model = planted_model(spec.needles);
    let d = model.config.d_model;
    let mut cases = Vec::with_capacity(spec.depths);
    for depth_index in 0..spec.depths {
        let mut media = MediaInput::from_grid(
            spec.frames,
            1,
            spec.tokens_per_frame,
            d,
            spec.seed ^ (depth_index as u64).wrapping_mul(0x9E37_79B9),
        );
        // Haystack rows live in the orthogonal complement of every
        // query/readout direction.
        let hs = haystack_start(spec.needles);
        let mut rng = Rng::new(spec.seed.wrapping_add(depth_index as u64));
        for i in 0..media.patches.rows() {
            let row = media.patches.row_mut(i);
            for v in row[..hs].iter_mut() {
                *v = 0.0;
            }
            for v in row[hs..].iter_mut() {
                *v = rng.next_symmetric(0.5);
            }
        }
        let frames = needle_frames(spec, depth_index);
        let mut needle_rows = Vec::with_capacity(spec.needles);
        for (i, &f) in frames.iter().enumerate() {
            let row_idx = f * spec.tokens_per_frame;
            let row = media.patches.row_mut(row_idx);
            row.fill(0.0);
            row[2 * i] = ALPHA;
            row[2 * i + 1] = BETA;
            needle_rows.push(row_idx);
        }
        cases.push(NiahCase { depth_index, media, needle_rows });
    }
    Ok(NiahBundle { spec: spec.clone(), model, cases })
}

// ── Running ─────────────────────────────────────────────────────────────────

/// One grid cell result: whether the queried needle was selected in every
/// layer's active set, and whether the decoded id equals the planted readout.
#[derive(Debug, Clone, PartialEq)]
pub struct NiahCell {
    pub frames: usize,
    pub depth_index: usize,
    pub decode_sparsity: f64,
    pub query_pos: usize,
    pub needle: usize,
    pub selection_recall: bool,
    pub readout_accuracy: bool,
}

fn session_config(decode_sparsity: f64) -> Result<SessionConfig> {
    let mut cfg = SessionConfig::new(SparsityConfig::new(0.0, decode_sparsity)?);
    cfg.system_ids = Vec::new();
    cfg.eos_id = u32::MAX; // never generated; answers run to max_new_tokens
    Ok(cfg)
}

/// Run one depth case at one decode sparsity: the queries are asked
/// sequentially in a multi-turn session with per-round eviction.
pub fn run_case(bundle: &NiahBundle, case: &NiahCase, decode_sparsity: f64) -> Result<Vec<NiahCell>> {
    let spec = &bundle.spec;
    let mut session = start_session(&bundle.model, session_config(decode_sparsity)?);
    session.prefill_media(&case.media)?;
    let mut cells = Vec::with_capacity(spec.queries.len());
    for (query_pos, &needle) in spec.queries.iter().enumerate() {
        let answer = session.ask(&[spec.query_token(needle)], 1)?;
        let record = session.transcript().last().expect("round recorded");
        let needle_row = case.needle_rows[needle];
        let selection_recall = record
            .active_sets
            .iter()
            .all(|layer| layer.binary_search(&needle_row).is_ok());
        let readout_accuracy = answer.first() == Some(&spec.readout_token(needle));
        cells.push(NiahCell {
            frames: spec.frames,
            depth_index: case.depth_index,
            decode_sparsity,
            query_pos,
            needle,
            selection_recall,
            readout_accuracy,
        });
        session.end_round(true)?;
    }
    Ok(cells)
}

/// Run the full (depth × sparsity) grid for a bundle. With `threads > 1`
/// the independent cells execute concurrently; output order is fixed by
/// (depth, sparsity, query), never by completion.
pub fn run_niah(bundle: &NiahBundle, sparsity_grid: &[f64], threads: usize) -> Result<Vec<NiahCell>> {
    let jobs: Vec<(usize, f64)> = bundle
        .cases
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| sparsity_grid.iter().map(move |&s| (ci, s)))
        .collect();
    let mut results: Vec<Option<Vec<NiahCell>>> = vec![None; jobs.len()];
    if threads <= 1 {
        for (slot, &(ci, s)) in jobs.iter().enumerate() {
            results[slot] = Some(run_case(bundle, &bundle.cases[ci], s)?);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Vec<NiahCell>>>>> =
            jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let (ci, s) = jobs[i];
                    let r = run_case(bundle, &bundle.cases[ci], s);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        for (slot, cell) in slots.into_iter().enumerate() {
            results[slot] = Some(cell.into_inner().unwrap().expect("worker filled slot")?);
        }
    }
    Ok(results.into_iter().flatten().flatten().collect())
}
