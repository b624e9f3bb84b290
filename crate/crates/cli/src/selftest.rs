//! Oracle-equivalence suites behind `visparse selftest`.
//!
//! Every case recomputes one of the pipeline's contracts against an
//! independent route (naive salience, monolithic prefill, dense decode,
//! cache fingerprints, rotary algebra) and reports its deviation. Cases are
//! independent; with `--threads > 1` they run concurrently and the report
//! bytes are identical because output order is fixed by the case list, not
//! by completion.

use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use visparse::engine::{start_session, SessionConfig};
use visparse::error::Error;
use visparse::kvcache::{ActiveView, SegmentTag};
use visparse::model::{
    build_model, decode_dense, decode_step, prefill_forward, MediaInput, Model, ModelConfig,
};
use visparse::report::{fmt_sig, KvReport};
use visparse::rng::Rng;
use visparse::rope::{rope_apply, Position};
use visparse::ropemap::{remap_mrope, remap_unified};
use visparse::salience::{salience_naive, salience_streaming, AttnProbe, SalienceMode};
use visparse::sparsity::SparsityConfig;
use visparse::tensor::{dot, Tensor};

struct Case {
    suite: &'static str,
    name: String,
    tolerance: f64,
    run: Box<dyn Fn() -> f64 + Send + Sync>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn test_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::small();
    cfg.seed = seed;
    build_model(&cfg).expect("small config is valid")
}

// ── Case builders ───────────────────────────────────────────────────────────

fn salience_cases(cases: &mut Vec<Case>) {
    for (mode, n_summary) in [
        (SalienceMode::IntraVisual, 0usize),
        (SalienceMode::SummaryToken, 1),
        (SalienceMode::MultiSummary, 3),
    ] {
        for n in [16usize, 64, 257] {
            for block in [1usize, 16, 128, n + 3] {
                for seed in [0u64, 1] {
                    cases.push(Case {
                        suite: "streaming-salience",
                        name: format!("{}-n{n}-b{block}-s{seed}", mode.name()),
                        tolerance: 1e-9,
                        run: Box::new(move || {
                            let mut rng = Rng::new(seed.wrapping_mul(31).wrapping_add(n as u64));
                            let rows = n_summary + n;
                            let heads: Vec<(Tensor, Tensor)> = (0..2)
                                .map(|_| (rng.fill(&[rows, 8], 1.0), rng.fill(&[rows, 8], 1.0)))
                                .collect();
                            let probe = AttnProbe { heads, n_summary };
                            let naive = salience_naive(&probe, mode, 0).unwrap();
                            let stream = salience_streaming(&probe, mode, 0, block).unwrap();
                            max_abs_diff(&naive.scores, &stream.scores)
                        }),
                    });
                }
            }
        }
    }
}

fn chunked_prefill_cases(cases: &mut Vec<Case>) {
    for seed in 0..6u64 {
        cases.push(Case {
            suite: "chunked-prefill",
            name: format!("s{seed}"),
            tolerance: 1e-12,
            run: Box::new(move || {
                let model = test_model(seed);
                let mut rng = Rng::new(seed ^ 0xC0FFEE);
                let rows = rng.fill(&[12, model.config.d_model], 0.5);
                let split = 1 + (rng.next_u64() % 10) as usize;

                let mut mono = model.new_cache();
                let logits_mono =
                    prefill_forward(&model, &rows, &mut mono, SegmentTag::visual()).unwrap();

                let first = rows.select_rows(&(0..split).collect::<Vec<_>>());
                let second = rows.select_rows(&(split..12).collect::<Vec<_>>());
                let mut chunked = model.new_cache();
                prefill_forward(&model, &first, &mut chunked, SegmentTag::visual()).unwrap();
                let logits_chunked =
                    prefill_forward(&model, &second, &mut chunked, SegmentTag::visual()).unwrap();

                let cache_same = mono.fingerprint() == chunked.fingerprint();
                let dev = max_abs_diff(&logits_mono, &logits_chunked);
                if cache_same {
                    dev
                } else {
                    f64::INFINITY
                }
            }),
        });
    }
}

fn sparse_dense_decode_cases(cases: &mut Vec<Case>) {
    for seed in 0..6u64 {
        cases.push(Case {
            suite: "sparse-dense-decode",
            name: format!("s{seed}"),
            tolerance: 0.0,
            run: Box::new(move || {
                let model = test_model(seed.wrapping_add(100));
                let mut rng = Rng::new(seed ^ 0xDEC0DE);
                let rows = rng.fill(&[7, model.config.d_model], 0.5);
                let mut cache = model.new_cache();
                prefill_forward(&model, &rows, &mut cache, SegmentTag::visual()).unwrap();
                let mut dense_cache = cache.clone();
                let mut view = ActiveView::pack_full(&cache).unwrap();
                let tok = (seed % 5) as u32 + 4;
                let sparse = decode_step(&model, tok, &mut cache, &mut view, 1).unwrap();
                let dense = decode_dense(&model, tok, &mut dense_cache, 1).unwrap();
                if sparse == dense {
                    0.0
                } else {
                    max_abs_diff(&sparse, &dense).max(f64::MIN_POSITIVE)
                }
            }),
        });
    }
}

fn eviction_cases(cases: &mut Vec<Case>) {
    for seed in 0..6u64 {
        cases.push(Case {
            suite: "eviction-inverse",
            name: format!("s{seed}"),
            tolerance: 0.0,
            run: Box::new(move || {
                let model = test_model(seed.wrapping_add(300));
                let mut cfg = SessionConfig::new(SparsityConfig::new(0.5, 0.5).unwrap());
                cfg.seed = seed;
                let media = MediaInput::from_grid(2, 2, 2, model.config.d_model, seed ^ 0xE1);
                let mut s = start_session(&model, cfg);
                s.prefill_media(&media).unwrap();
                let before = s.cache().fingerprint();
                s.ask(&[5, 6], 3).unwrap();
                s.end_round(true).unwrap();
                if s.cache().fingerprint() == before {
                    0.0
                } else {
                    f64::INFINITY
                }
            }),
        });
    }
}

fn multiturn_cases(cases: &mut Vec<Case>) {
    for seed in 0..3u64 {
        cases.push(Case {
            suite: "zero-sparsity-multiturn",
            name: format!("s{seed}"),
            tolerance: 0.0,
            run: Box::new(move || {
                let model = test_model(seed.wrapping_add(500));
                let cfg = SessionConfig::new(SparsityConfig::dense());
                let media = MediaInput::from_grid(1, 2, 3, model.config.d_model, seed ^ 0x77);
                let questions: [&[u32]; 3] = [&[7, 8], &[9], &[10, 11]];

                let mut multi = start_session(&model, cfg.clone());
                multi.prefill_media(&media).unwrap();
                for q in questions {
                    let a = multi.ask(q, 4).unwrap();
                    multi.end_round(true).unwrap();
                    let mut single = start_session(&model, cfg.clone());
                    single.prefill_media(&media).unwrap();
                    if single.ask(q, 4).unwrap() != a {
                        return f64::INFINITY;
                    }
                }
                0.0
            }),
        });
    }
}

fn rope_cases(cases: &mut Vec<Case>) {
    for seed in 0..4u64 {
        cases.push(Case {
            suite: "rope-relative",
            name: format!("s{seed}"),
            tolerance: 1e-9,
            run: Box::new(move || {
                let mut rng = Rng::new(seed ^ 0x40FE);
                let mut worst = 0.0f64;
                for _ in 0..100 {
                    let q = rng.fill(&[1, 8], 1.0);
                    let k = rng.fill(&[1, 8], 1.0);
                    let m = (rng.next_u64() % 400) as i64;
                    let n = (rng.next_u64() % 400) as i64;
                    let s = (rng.next_u64() % 200) as i64;
                    let d1 = dot(
                        rope_apply(&q, &[Position::Scalar(m)], 10_000.0).unwrap().row(0),
                        rope_apply(&k, &[Position::Scalar(n)], 10_000.0).unwrap().row(0),
                    );
                    let d2 = dot(
                        rope_apply(&q, &[Position::Scalar(m + s)], 10_000.0).unwrap().row(0),
                        rope_apply(&k, &[Position::Scalar(n + s)], 10_000.0).unwrap().row(0),
                    );
                    worst = worst.max((d1 - d2).abs());
                }
                worst
            }),
        });
    }
    cases.push(Case {
        suite: "remap-properties",
        name: "unified-contiguity".into(),
        tolerance: 0.0,
        run: Box::new(|| {
            let mut rng = Rng::new(0xAB);
            for _ in 0..200 {
                let start = (rng.next_u64() % 20) as i64;
                let span = 2 + (rng.next_u64() % 40) as i64;
                let kept: Vec<i64> =
                    (start..start + span).filter(|_| rng.next_f64() < 0.5).collect();
                let kept = if kept.is_empty() { vec![start] } else { kept };
                let plan = remap_unified(&kept, start, start + span).unwrap();
                for (i, (_, n)) in plan.token_map.iter().enumerate() {
                    if *n != Position::Scalar(start + i as i64) {
                        return f64::INFINITY;
                    }
                }
            }
            0.0
        }),
    });
    cases.push(Case {
        suite: "remap-properties",
        name: "mrope-injective".into(),
        tolerance: 0.0,
        run: Box::new(|| {
            let mut rng = Rng::new(0xCD);
            for _ in 0..200 {
                let mut coords = Vec::new();
                for t in 0..3i64 {
                    for h in 0..3i64 {
                        for w in 0..3i64 {
                            if rng.next_f64() < 0.5 {
                                coords.push((t, h, w));
                            }
                        }
                    }
                }
                if coords.is_empty() {
                    coords.push((0, 0, 0));
                }
                let plan = remap_mrope(&coords, 100).unwrap();
                let mut outs: Vec<_> = plan
                    .token_map
                    .iter()
                    .map(|&(_, n)| match n {
                        Position::Grid { t, h, w } => (t, h, w),
                        Position::Scalar(p) => (p, p, p),
                    })
                    .collect();
                let before = outs.len();
                outs.sort_unstable();
                outs.dedup();
                if outs.len() != before {
                    return f64::INFINITY;
                }
            }
            0.0
        }),
    });
}

// ── Runner ──────────────────────────────────────────────────────────────────

pub fn cmd_selftest(out: &Path, threads: usize) -> Result<ExitCode, Error> {
    let mut cases = Vec::new();
    salience_cases(&mut cases);
    chunked_prefill_cases(&mut cases);
    sparse_dense_decode_cases(&mut cases);
    eviction_cases(&mut cases);
    multiturn_cases(&mut cases);
    rope_cases(&mut cases);

    let deviations: Vec<f64> = if threads <= 1 {
        cases.iter().map(|c| (c.run)()).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<f64>> = cases.iter().map(|_| Mutex::new(f64::NAN)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(cases.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= cases.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = (cases[i].run)();
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap()).collect()
    };

    let mut kv = KvReport::new();
    kv.str("command", "selftest").int("cases", cases.len() as u64);
    let mut failures = 0usize;
    let mut lines = String::new();
    for (case, &dev) in cases.iter().zip(&deviations) {
        let pass = dev <= case.tolerance;
        if !pass {
            failures += 1;
        }
        lines.push_str(&format!(
            "{} {}/{} deviation={} tolerance={}\n",
            if pass { "PASS" } else { "FAIL" },
            case.suite,
            case.name,
            fmt_sig(dev),
            fmt_sig(case.tolerance),
        ));
    }
    kv.int("failures", failures as u64);
    let report = format!("{}{}", kv.finish(), lines);
    std::fs::write(out.join("selftest.txt"), &report)?;
    print!("{report}");
    if failures > 0 {
        Ok(ExitCode::from(3))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}
