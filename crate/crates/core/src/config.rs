//! Line-oriented configuration format with nested sections.
//!
//! Grammar (one construct per line, `#` starts a comment):
//!
//! ```text
//! key value [value ...]     # scalar or list entry
//! name {                    # opens a nested section
//! }                         # closes the innermost section
//! ```
//!
//! Values never contain whitespace. Parsing is schema-checked: unknown keys
//! and sections are rejected, so a typo fails loudly instead of silently
//! falling back to a default.

use crate::costmodel::WorkloadSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RopeMode};
use crate::niah::NiahSpec;
use crate::sparsity::SparsityConfig;

// ── Generic tree ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone)]
pub enum Item {
    Kv { key: String, values: Vec<String> },
    Sub(Section),
}

/// Parse the raw section tree from config text.
pub fn parse_tree(text: &str) -> Result<Section> {
    let mut stack = vec![Section { name: "<root>".into(), items: Vec::new() }];
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Config(format!("line {}: {msg}", lineno + 1));
        if line == "}" {
            let done = stack.pop().ok_or_else(|| err("unmatched '}'"))?;
            match stack.last_mut() {
                Some(parent) => parent.items.push(Item::Sub(done)),
                None => return Err(err("unmatched '}'")),
            }
        } else if let Some(name) = line.strip_suffix('{') {
            let name = name.trim();
            if name.is_empty() || name.split_whitespace().count() != 1 {
                return Err(err("section header must be 'name {'"));
            }
            stack.push(Section { name: name.into(), items: Vec::new() });
        } else {
            let mut tokens = line.split_whitespace();
            let key = tokens.next().expect("nonempty line").to_string();
            let values: Vec<String> = tokens.map(str::to_string).collect();
            if values.is_empty() {
                return Err(err(&format!("key '{key}' has no value")));
            }
            stack
                .last_mut()
                .expect("root always present")
                .items
                .push(Item::Kv { key, values });
        }
    }
    if stack.len() != 1 {
        return Err(Error::Config(format!(
            "{} unclosed section(s) at end of input",
            stack.len() - 1
        )));
    }
    Ok(stack.pop().unwrap())
}

// ── Typed extraction ────────────────────────────────────────────────────────

/// Cursor over one section that tracks which items were consumed; anything
/// left over at `finish()` is an unknown-key error.
struct Reader<'a> {
    section: &'a Section,
    used: Vec<bool>,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(section: &'a Section, path: &str) -> Self {
        Self { section, used: vec![false; section.items.len()], path: path.into() }
    }

    fn take_values(&mut self, key: &str) -> Option<&'a [String]> {
        for (i, item) in self.section.items.iter().enumerate() {
            if self.used[i] {
                continue;
            }
            if let Item::Kv { key: k, values } = item {
                if k == key {
                    self.used[i] = true;
                    return Some(values);
                }
            }
        }
        None
    }

    fn take_subs(&mut self, name: &str) -> Vec<&'a Section> {
        let mut out = Vec::new();
        for (i, item) in self.section.items.iter().enumerate() {
            if self.used[i] {
                continue;
            }
            if let Item::Sub(s) = item {
                if s.name == name {
                    self.used[i] = true;
                    out.push(s);
                }
            }
        }
        out
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take_values(key) {
            None => Ok(default),
            Some(vals) => {
                if vals.len() != 1 {
                    return Err(Error::Config(format!(
                        "{}.{key}: expected one value, got {}",
                        self.path,
                        vals.len()
                    )));
                }
                vals[0].parse().map_err(|_| {
                    Error::Config(format!("{}.{key}: cannot parse '{}'", self.path, vals[0]))
                })
            }
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.take_values(key) {
            None => Ok(default),
            Some(vals) => vals
                .iter()
                .map(|v| {
                    v.parse().map_err(|_| {
                        Error::Config(format!("{}.{key}: cannot parse '{v}'", self.path))
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        for (i, item) in self.section.items.iter().enumerate() {
            if !self.used[i] {
                let what = match item {
                    Item::Kv { key, .. } => format!("key '{key}'"),
                    Item::Sub(s) => format!("section '{}'", s.name),
                };
                return Err(Error::Config(format!("{}: unknown {what}", self.path)));
            }
        }
        Ok(())
    }
}

// ── Config structs ──────────────────────────────────────────────────────────

/// Media geometry for a session script.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSpec {
    pub ids: Vec<u32>,
    pub max_new_tokens: usize,
}

/// An ordered multi-turn conversation over one media input.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionScript {
    pub system_ids: Vec<u32>,
    pub eos_id: u32,
    pub salience_layer: Option<usize>,
    pub salience_block: usize,
    pub evict: bool,
    pub media: MediaSpec,
    pub rounds: Vec<RoundSpec>,
}

/// Sweep axes for the needle-in-a-haystack benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct NiahSweep {
    pub frame_grid: Vec<usize>,
    pub tokens_per_frame: usize,
    pub needles: usize,
    pub depths: usize,
    pub queries: Vec<usize>,
    pub sparsity_grid: Vec<f64>,
    pub seed: u64,
}

impl NiahSweep {
    pub fn spec_for(&self, frames: usize) -> NiahSpec {
        NiahSpec {
            frames,
            tokens_per_frame: self.tokens_per_frame,
            needles: self.needles,
            depths: self.depths,
            queries: self.queries.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeConfig {
    pub sink_threshold: f64,
}

/// Everything a CLI run needs, parsed and schema-checked.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sparsity: SparsityConfig,
    pub session: Option<SessionScript>,
    pub niah: Option<NiahSweep>,
    pub workload: Option<WorkloadSpec>,
    pub analyze: AnalyzeConfig,
    pub seed: u64,
}

fn parse_model(section: &Section, default_seed: u64) -> Result<ModelConfig> {
    let mut r = Reader::new(section, "model");
    let base = ModelConfig::small();
    let rope_mode = match r.scalar::<String>("rope_mode", "unified".into())?.as_str() {
        "unified" => RopeMode::Unified,
        "multimodal" => RopeMode::Multimodal,
        other => {
            return Err(Error::Config(format!(
                "model.rope_mode: '{other}' is not unified|multimodal"
            )))
        }
    };
    let cfg = ModelConfig {
        n_layers_vis: r.scalar("n_layers_vis", base.n_layers_vis)?,
        n_layers_dec: r.scalar("n_layers_dec", base.n_layers_dec)?,
        d_model: r.scalar("d_model", base.d_model)?,
        d_head: r.scalar("d_head", base.d_head)?,
        n_heads: r.scalar("n_heads", base.n_heads)?,
        n_kv_heads: r.scalar("n_kv_heads", base.n_kv_heads)?,
        vocab_size: r.scalar("vocab_size", base.vocab_size)?,
        summary_tokens: r.scalar("summary_tokens", base.summary_tokens)?,
        rope_mode,
        theta_base: r.scalar("theta_base", base.theta_base)?,
        seed: r.scalar("seed", default_seed)?,
    };
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sparsity(section: &Section) -> Result<SparsityConfig> {
    let mut r = Reader::new(section, "sparsity");
    let cfg = SparsityConfig::new(
        r.scalar("prefill_sparsity", 0.0)?,
        r.scalar("decode_sparsity", 0.0)?,
    )?;
    r.finish()?;
    Ok(cfg)
}

fn parse_media(section: &Section, default_seed: u64) -> Result<MediaSpec> {
    let mut r = Reader::new(section, "session.media");
    let media = MediaSpec {
        frames: r.scalar("frames", 1)?,
        height: r.scalar("height", 2)?,
        width: r.scalar("width", 2)?,
        seed: r.scalar("seed", default_seed)?,
    };
    r.finish()?;
    Ok(media)
}

fn parse_session(section: &Section, default_seed: u64) -> Result<SessionScript> {
    let mut r = Reader::new(section, "session");
    let system_ids = r.list("system_ids", vec![1, 2, 3])?;
    let eos_id = r.scalar("eos_id", 0u32)?;
    let salience_layer = match r.take_values("salience_layer") {
        None => None,
        Some(v) if v.len() == 1 => Some(v[0].parse().map_err(|_| {
            Error::Config(format!("session.salience_layer: cannot parse '{}'", v[0]))
        })?),
        Some(_) => return Err(Error::Config("session.salience_layer: one value".into())),
    };
    let salience_block = r.scalar("salience_block", 64usize)?;
    let evict = r.scalar("evict", true)?;
    let media_secs = r.take_subs("media");
    if media_secs.len() != 1 {
        return Err(Error::Config("session: exactly one media section required".into()));
    }
    let media = parse_media(media_secs[0], default_seed)?;
    let mut rounds = Vec::new();
    for rs in r.take_subs("round") {
        let mut rr = Reader::new(rs, "session.round");
        let ids: Vec<u32> = rr.list("ids", Vec::new())?;
        if ids.is_empty() {
            return Err(Error::Config("session.round: ids must be nonempty".into()));
        }
        let max_new_tokens = rr.scalar("max_new_tokens", 8usize)?;
        rr.finish()?;
        rounds.push(RoundSpec { ids, max_new_tokens });
    }
    if rounds.is_empty() {
        return Err(Error::Config("session: at least one round required".into()));
    }
    r.finish()?;
    Ok(SessionScript {
        system_ids,
        eos_id,
        salience_layer,
        salience_block,
        evict,
        media,
        rounds,
    })
}

fn parse_niah(section: &Section, default_seed: u64) -> Result<NiahSweep> {
    let mut r = Reader::new(section, "niah");
    let mut sweep = NiahSweep {
        frame_grid: r.list("frames", vec![32])?,
        tokens_per_frame: r.scalar("tokens_per_frame", 4)?,
        needles: r.scalar("needles", 5)?,
        depths: r.scalar("depths", 5)?,
        queries: r.list("queries", Vec::new())?,
        sparsity_grid: r.list("sparsity_grid", vec![0.0, 0.9])?,
        seed: r.scalar("seed", default_seed)?,
    };
    r.finish()?;
    if sweep.queries.is_empty() {
        sweep.queries = (0..sweep.needles).collect();
    }
    for &s in &sweep.sparsity_grid {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!("niah.sparsity_grid: {s} outside [0, 1)")));
        }
    }
    Ok(sweep)
}

fn parse_workload(section: &Section, sparsity: SparsityConfig) -> Result<WorkloadSpec> {
    let mut r = Reader::new(section, "workload");
    let base = WorkloadSpec::long_video_default();
    let spec = WorkloadSpec {
        n_visual_dense: r.scalar("n_visual_dense", base.n_visual_dense)?,
        n_system: r.scalar("n_system", base.n_system)?,
        n_query_per_round: r.scalar("n_query_per_round", base.n_query_per_round)?,
        rounds: r.scalar("rounds", base.rounds)?,
        decode_tokens_per_round: r
            .scalar("decode_tokens_per_round", base.decode_tokens_per_round)?,
        n_layers: r.scalar("n_layers", base.n_layers)?,
        d_model: r.scalar("d_model", base.d_model)?,
        d_ff: r.scalar("d_ff", base.d_ff)?,
        n_heads: r.scalar("n_heads", base.n_heads)?,
        n_kv_heads: r.scalar("n_kv_heads", base.n_kv_heads)?,
        d_head: r.scalar("d_head", base.d_head)?,
        element_width: r.scalar("element_width", base.element_width)?,
        encoder_layers: r.scalar("encoder_layers", base.encoder_layers)?,
        flops_per_second: r.scalar("flops_per_second", base.flops_per_second)?,
        bytes_per_second: r.scalar("bytes_per_second", base.bytes_per_second)?,
        sparsity,
    };
    r.finish()?;
    spec.validate()?;
    Ok(spec)
}

/// Parse a full run configuration. `seed_override` (the CLI `--seed` flag)
/// takes precedence over the file's top-level `seed`.
pub fn parse_run_config(text: &str, seed_override: Option<u64>) -> Result<RunConfig> {
    let root = parse_tree(text)?;
    let mut r = Reader::new(&root, "<root>");
    let file_seed: u64 = r.scalar("seed", 0u64)?;
    let seed = seed_override.unwrap_or(file_seed);

    let model_secs = r.take_subs("model");
    let model = match model_secs.len() {
        0 => {
            let mut m = ModelConfig::small();
            m.seed = seed;
            m
        }
        1 => parse_model(model_secs[0], seed)?,
        _ => return Err(Error::Config("at most one model section".into())),
    };

    let spars_secs = r.take_subs("sparsity");
    let sparsity = match spars_secs.len() {
        0 => SparsityConfig::dense(),
        1 => parse_sparsity(spars_secs[0])?,
        _ => return Err(Error::Config("at most one sparsity section".into())),
    };

    let session_secs = r.take_subs("session");
    let session = match session_secs.len() {
        0 => None,
        1 => Some(parse_session(session_secs[0], seed)?),
        _ => return Err(Error::Config("at most one session section".into())),
    };

    let niah_secs = r.take_subs("niah");
    let niah = match niah_secs.len() {
        0 => None,
        1 => Some(parse_niah(niah_secs[0], seed)?),
        _ => return Err(Error::Config("at most one niah section".into())),
    };

    let workload_secs = r.take_subs("workload");
    let workload = match workload_secs.len() {
        0 => None,
        1 => Some(parse_workload(workload_secs[0], sparsity)?),
        _ => return Err(Error::Config("at most one workload section".into())),
    };

    let analyze_secs = r.take_subs("analyze");
    let analyze = match analyze_secs.len() {
        0 => AnalyzeConfig { sink_threshold: 0.5 },
        1 => {
            let mut ar = Reader::new(analyze_secs[0], "analyze");
            let cfg = AnalyzeConfig { sink_threshold: ar.scalar("sink_threshold", 0.5)? };
            ar.finish()?;
            cfg
        }
        _ => return Err(Error::Config("at most one analyze section".into())),
    };

    r.finish()?;
    Ok(RunConfig { model, sparsity, session, niah, workload, analyze, seed })
}
