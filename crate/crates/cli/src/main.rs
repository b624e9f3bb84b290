//! Command-line surface: deterministic runs of the toy pipeline, the
//! synthetic retrieval benchmark, the analytic cost model, selection
//! diagnostics, and the oracle-equivalence selftest.
//!
//! Exit codes: 0 success, 2 configuration error, 3 invariant violation
//! during selftest, 1 any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use visparse::analysis::{classify_sinks, selection_frequency, selection_iou, SelectionRecord};
use visparse::config::{parse_run_config, RunConfig, SessionScript};
use visparse::costmodel::{speedup_report, WorkloadSpec};
use visparse::engine::{start_session, Session, SessionConfig};
use visparse::error::Error;
use visparse::model::{build_model, MediaInput, Model};
use visparse::niah::{gen_niah, run_niah, NiahCell};
use visparse::report::{fmt_sig, Csv, KvReport};

mod selftest;

#[derive(Parser)]
#[command(name = "visparse", about = "Decoupled visual sparsity, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (line-oriented sections); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override; wins over the config file's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for grid/suite execution (output order is fixed).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured model and write its checksum record.
    GenModel(Common),
    /// Execute a multi-turn session script and write reports.
    Run(Common),
    /// Generate and sweep the synthetic needle-in-a-haystack benchmark.
    Niah(Common),
    /// Evaluate the analytic cost model and write the speedup report.
    Cost(Common),
    /// Record per-round selections and emit IoU/frequency/sink diagnostics.
    Analyze(Common),
    /// Run the oracle-equivalence suites; exit 3 on any violation.
    Selftest(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::GenModel(c) => ("gen-model", c),
        Command::Run(c) => ("run", c),
        Command::Niah(c) => ("niah", c),
        Command::Cost(c) => ("cost", c),
        Command::Analyze(c) => ("analyze", c),
        Command::Selftest(c) => ("selftest", c),
    };
    match dispatch(name, common) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("visparse {name}: {e}");
            match e {
                Error::Config(_) | Error::Invalid(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(name: &str, common: &Common) -> Result<ExitCode, Error> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let cfg = parse_run_config(&text, common.seed)?;
    std::fs::create_dir_all(&common.out)?;
    match name {
        "gen-model" => cmd_gen_model(&cfg, &common.out),
        "run" => cmd_run(&cfg, &common.out),
        "niah" => cmd_niah(&cfg, &common.out, common.threads),
        "cost" => cmd_cost(&cfg, &common.out),
        "analyze" => cmd_analyze(&cfg, &common.out),
        "selftest" => return selftest::cmd_selftest(&common.out, common.threads),
        _ => unreachable!(),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn write(out: &Path, file: &str, contents: &str) -> Result<(), Error> {
    std::fs::write(out.join(file), contents)?;
    Ok(())
}

// ── gen-model ───────────────────────────────────────────────────────────────

fn cmd_gen_model(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let model = build_model(&cfg.model)?;
    let mut kv = KvReport::new();
    kv.str("command", "gen-model")
        .int("seed", cfg.model.seed)
        .int("n_layers_vis", cfg.model.n_layers_vis as u64)
        .int("n_layers_dec", cfg.model.n_layers_dec as u64)
        .int("d_model", cfg.model.d_model as u64)
        .int("d_head", cfg.model.d_head as u64)
        .int("n_heads", cfg.model.n_heads as u64)
        .int("n_kv_heads", cfg.model.n_kv_heads as u64)
        .int("vocab_size", cfg.model.vocab_size as u64)
        .int("summary_tokens", cfg.model.summary_tokens as u64)
        .str("rope_mode", cfg.model.rope_mode.name())
        .num("theta_base", cfg.model.theta_base)
        .str("weight_checksum", &format!("{:016x}", model.weight_checksum()));
    write(out, "model.txt", &kv.finish())?;
    println!("gen-model: checksum {:016x}", model.weight_checksum());
    Ok(())
}

// ── run ─────────────────────────────────────────────────────────────────────

fn session_config(cfg: &RunConfig, script: &SessionScript) -> SessionConfig {
    SessionConfig {
        sparsity: cfg.sparsity,
        system_ids: script.system_ids.clone(),
        eos_id: script.eos_id,
        salience_layer: script.salience_layer,
        salience_block: script.salience_block,
        seed: cfg.seed,
    }
}

fn script_media(script: &SessionScript, d_model: usize) -> MediaInput {
    MediaInput::from_grid(
        script.media.frames,
        script.media.height,
        script.media.width,
        d_model,
        script.media.seed,
    )
}

fn run_script<'m>(
    model: &'m Model,
    cfg: &RunConfig,
    script: &SessionScript,
) -> Result<Session<'m>, Error> {
    let mut session = start_session(model, session_config(cfg, script));
    let media = script_media(script, model.config.d_model);
    session.prefill_media(&media)?;
    for round in &script.rounds {
        session.ask(&round.ids, round.max_new_tokens)?;
        session.end_round(script.evict)?;
    }
    Ok(session)
}

fn ids_to_string(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Workload for the cost figures: explicit `workload` section if present,
/// otherwise derived from the session script and model dims (f64 entries,
/// encoder depth from the model).
fn effective_workload(cfg: &RunConfig, script: &SessionScript) -> WorkloadSpec {
    if let Some(w) = &cfg.workload {
        return w.clone();
    }
    let base = WorkloadSpec::long_video_default();
    let n_visual = script.media.frames * script.media.height * script.media.width;
    WorkloadSpec {
        n_visual_dense: n_visual.max(1),
        n_system: script.system_ids.len().max(1),
        n_query_per_round: script.rounds.iter().map(|r| r.ids.len()).max().unwrap_or(1),
        rounds: script.rounds.len(),
        decode_tokens_per_round: script
            .rounds
            .iter()
            .map(|r| r.max_new_tokens)
            .max()
            .unwrap_or(1),
        n_layers: cfg.model.n_layers_dec.max(1),
        d_model: cfg.model.d_model,
        d_ff: cfg.model.d_ff(),
        n_heads: cfg.model.n_heads,
        n_kv_heads: cfg.model.n_kv_heads,
        d_head: cfg.model.d_head,
        element_width: 8,
        encoder_layers: cfg.model.n_layers_vis,
        flops_per_second: base.flops_per_second,
        bytes_per_second: base.bytes_per_second,
        sparsity: cfg.sparsity,
    }
}

fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let script = cfg
        .session
        .as_ref()
        .ok_or_else(|| Error::Config("run: config needs a session section".into()))?;
    let model = build_model(&cfg.model)?;
    let session = run_script(&model, cfg, script)?;
    let summary = session.prefill_summary().expect("media prefilled");
    let stats = session.cache().stats(8);

    let mut kv = KvReport::new();
    kv.str("command", "run")
        .int("seed", cfg.seed)
        .num("prefill_sparsity", cfg.sparsity.prefill_sparsity)
        .num("decode_sparsity", cfg.sparsity.decode_sparsity)
        .int("visual_tokens_dense", summary.n_visual_dense as u64)
        .int("visual_tokens_kept", summary.kept_indices.len() as u64)
        .int("rounds", session.transcript().len() as u64)
        .int("cache_entries_final", stats.total_entries() as u64)
        .int("cache_bytes_final", stats.bytes as u64);
    for (kind, n) in stats.per_kind {
        kv.int(&format!("cache_entries_{}", kind.name()), n as u64);
    }
    kv.blank();
    for rec in session.transcript() {
        let r = rec.round_id;
        kv.str(&format!("round_{r}_question"), &ids_to_string(&rec.question_ids))
            .str(&format!("round_{r}_answer"), &ids_to_string(&rec.answer_ids))
            .int(&format!("round_{r}_active_budget"), rec.active_budget as u64);
    }
    kv.blank();
    let workload = effective_workload(cfg, script);
    let speed = speedup_report(&workload)?;
    kv.num("cost_prefill_ratio", speed.prefill_ratio)
        .num("cost_decode_ratio", speed.decode_ratio)
        .num("cost_e2e_ratio", speed.e2e_ratio)
        .num("cost_kv_reduction_pct", speed.kv_reduction_pct)
        .num("cost_flop_reduction_pct", speed.linear_flop_reduction_pct);
    write(out, "report.txt", &kv.finish())?;

    let mut csv = Csv::new();
    csv.header(&["round", "question", "answer", "active_budget"]);
    for rec in session.transcript() {
        csv.row(&[
            rec.round_id.to_string(),
            ids_to_string(&rec.question_ids),
            ids_to_string(&rec.answer_ids),
            rec.active_budget.to_string(),
        ]);
    }
    write(out, "transcript.csv", &csv.finish())?;

    let mut csv = Csv::new();
    csv.header(&["round", "layer", "active_visual_indices"]);
    for rec in session.transcript() {
        for (layer, set) in rec.active_sets.iter().enumerate() {
            csv.row(&[
                rec.round_id.to_string(),
                layer.to_string(),
                set.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            ]);
        }
    }
    write(out, "active_sets.csv", &csv.finish())?;
    println!(
        "run: {} rounds, kept {}/{} visual tokens",
        session.transcript().len(),
        summary.kept_indices.len(),
        summary.n_visual_dense
    );
    Ok(())
}

// ── niah ────────────────────────────────────────────────────────────────────

fn cmd_niah(cfg: &RunConfig, out: &Path, threads: usize) -> Result<(), Error> {
    let sweep = cfg
        .niah
        .as_ref()
        .ok_or_else(|| Error::Config("niah: config needs a niah section".into()))?;
    let mut cells: Vec<NiahCell> = Vec::new();
    for &frames in &sweep.frame_grid {
        let bundle = gen_niah(&sweep.spec_for(frames))?;
        cells.extend(run_niah(&bundle, &sweep.sparsity_grid, threads)?);
    }
    cells.sort_by(|a, b| {
        (a.frames, a.depth_index, a.query_pos)
            .cmp(&(b.frames, b.depth_index, b.query_pos))
            .then(a.decode_sparsity.total_cmp(&b.decode_sparsity))
    });

    let mut csv = Csv::new();
    csv.header(&[
        "frames",
        "depth",
        "decode_sparsity",
        "query_pos",
        "needle",
        "recall",
        "accuracy",
    ]);
    let mut recall_hits = 0usize;
    let mut acc_hits = 0usize;
    for c in &cells {
        recall_hits += c.selection_recall as usize;
        acc_hits += c.readout_accuracy as usize;
        csv.row(&[
            c.frames.to_string(),
            c.depth_index.to_string(),
            fmt_sig(c.decode_sparsity),
            c.query_pos.to_string(),
            c.needle.to_string(),
            (c.selection_recall as u8).to_string(),
            (c.readout_accuracy as u8).to_string(),
        ]);
    }
    write(out, "niah_grid.csv", &csv.finish())?;

    let n = cells.len().max(1);
    let mut kv = KvReport::new();
    kv.str("command", "niah")
        .int("cells", cells.len() as u64)
        .num("selection_recall", recall_hits as f64 / n as f64)
        .num("readout_accuracy", acc_hits as f64 / n as f64);
    write(out, "niah_summary.txt", &kv.finish())?;
    println!(
        "niah: {} cells, recall {}, accuracy {}",
        cells.len(),
        fmt_sig(recall_hits as f64 / n as f64),
        fmt_sig(acc_hits as f64 / n as f64)
    );
    Ok(())
}

// ── cost ────────────────────────────────────────────────────────────────────

fn cmd_cost(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let workload = match &cfg.workload {
        Some(w) => w.clone(),
        None => {
            let mut w = WorkloadSpec::long_video_default();
            w.sparsity = cfg.sparsity;
            w
        }
    };
    let r = speedup_report(&workload)?;
    let rows: Vec<(&str, f64)> = vec![
        ("prefill_flops_dense", r.prefill_flops_dense),
        ("prefill_flops_sparse", r.prefill_flops_sparse),
        ("prefill_ratio", r.prefill_ratio),
        ("decode_bytes_per_token_dense", r.decode_bytes_per_token_dense),
        ("decode_bytes_per_token_sparse", r.decode_bytes_per_token_sparse),
        ("decode_flops_per_token_dense", r.decode_flops_per_token_dense),
        ("decode_flops_per_token_sparse", r.decode_flops_per_token_sparse),
        ("decode_ratio", r.decode_ratio),
        ("decode_flop_ratio", r.decode_flop_ratio),
        ("attn_byte_ratio", r.attn_byte_ratio),
        ("e2e_ratio", r.e2e_ratio),
        ("kv_reduction_pct", r.kv_reduction_pct),
        ("linear_flop_reduction_pct", r.linear_flop_reduction_pct),
    ];
    let mut kv = KvReport::new();
    kv.str("command", "cost")
        .int("n_visual_dense", workload.n_visual_dense as u64)
        .int("n_system", workload.n_system as u64)
        .int("rounds", workload.rounds as u64)
        .int("decode_tokens_per_round", workload.decode_tokens_per_round as u64)
        .num("prefill_sparsity", workload.sparsity.prefill_sparsity)
        .num("decode_sparsity", workload.sparsity.decode_sparsity);
    for (k, v) in &rows {
        kv.num(k, *v);
    }
    write(out, "cost.txt", &kv.finish())?;

    let mut csv = Csv::new();
    csv.header(&["metric", "value"]);
    for (k, v) in &rows {
        csv.row(&[k.to_string(), fmt_sig(*v)]);
    }
    write(out, "cost.csv", &csv.finish())?;
    println!(
        "cost: prefill {}x decode {}x e2e {}x",
        fmt_sig(r.prefill_ratio),
        fmt_sig(r.decode_ratio),
        fmt_sig(r.e2e_ratio)
    );
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────────────

fn cmd_analyze(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let script = cfg
        .session
        .as_ref()
        .ok_or_else(|| Error::Config("analyze: config needs a session section".into()))?;
    let model = build_model(&cfg.model)?;
    let session = run_script(&model, cfg, script)?;
    let n_visual = session.prefill_summary().expect("media prefilled").kept_indices.len();

    let records: Vec<SelectionRecord> = session
        .transcript()
        .iter()
        .map(|rec| SelectionRecord {
            label: format!("round{}", rec.round_id),
            per_layer: rec.active_sets.clone(),
            n_visual,
        })
        .collect();

    let iou = selection_iou(&records)?;
    let mut csv = Csv::new();
    csv.header(&["layer", "query_a", "query_b", "iou"]);
    for (l, m) in iou.per_layer.iter().enumerate() {
        for (a, row) in m.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                csv.row(&[l.to_string(), a.to_string(), b.to_string(), fmt_sig(*v)]);
            }
        }
    }
    write(out, "iou.csv", &csv.finish())?;

    let freq = selection_frequency(&records);
    let grid = session.kept_grid();
    let mut csv = Csv::new();
    csv.header(&["token", "t", "h", "w", "count"]);
    for (i, &count) in freq.iter().enumerate() {
        let (t, h, w) = grid.get(i).copied().unwrap_or((-1, -1, -1));
        csv.row(&[
            i.to_string(),
            t.to_string(),
            h.to_string(),
            w.to_string(),
            count.to_string(),
        ]);
    }
    write(out, "frequency.csv", &csv.finish())?;

    let sinks = classify_sinks(&records, cfg.analyze.sink_threshold)?;
    let mut kv = KvReport::new();
    kv.str("command", "analyze")
        .int("queries", records.len() as u64)
        .num("sink_threshold", sinks.threshold);
    for (l, v) in iou.mean_off_diagonal.iter().enumerate() {
        kv.num(&format!("layer_{l}_mean_iou"), *v);
    }
    kv.str(
        "sink_tokens",
        &sinks.sinks.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
    );
    kv.str(
        "retrieval_tokens",
        &sinks.retrieval.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
    );
    write(out, "analysis.txt", &kv.finish())?;
    println!("analyze: {} queries over {} layers", records.len(), iou.per_layer.len());
    Ok(())
}
