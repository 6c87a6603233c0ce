//! Acceptance suite: one line per criterion, exit code 1 on any unexpected failure.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde_json::{json, Value};
use twofloat::TwoFloat;

use common::oracles::{self, DenseBank, ItemInput, OracleReport, RefEncoder};
use common::tolerances::*;
use common::{fixture_path, gauss, random_flat, rng, unit, ParamScales};
use promptrag::config::{resolve, RunConfig, Sources};
use promptrag::embedders::{build_embedder, Embedder, EmbedderConfig, ProviderKind, Query, Style, SyntheticProvider};
use promptrag::encoder::{EncoderConfig, FrozenEncoder, Insertion};
use promptrag::evalharness::{gen_bench, run_grid, train_system, Bench, RecallReport, SynthBenchConfig, SystemConfig, TrainedSystem};
use promptrag::pipeline::Retriever;
use promptrag::promptbank::{BankConfig, PromptBank};
use promptrag::rag::{answer, EchoBackend, RagConfig, SystemPrompt, EVIDENCE_HEADER, PROMPT_HEADER, QUERY_HEADER};
use promptrag::trainer::{Objective, TrainConfig, Triplet};
use promptrag::vecindex::{CorpusItem, VecIndex};

/// Criteria reported as FAIL but left out of the exit code.
/// The analysis is recorded in the project's decisions ledger.
const KNOWN_RED: &[&str] = &["AC4a"];

const GRADIENT_SEEDS: u64 = 20;
const FRESH_ENTRIES: usize = 1000;
const EXACTNESS_CASES: u64 = 100;
const EXACTNESS_QUERIES: usize = 100;
const EXACTNESS_K: [usize; 3] = [1, 5, 17];
const CORRUPTION_CASES: usize = 256;
const RAG_CASES: u64 = 200;
const BASELINE_FIXTURE: &str = "training_baseline.json";
const DEFAULTS_FIXTURE: &str = "defaults_manifest.json";

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        pass,
        detail: detail.into(),
    }
}

const GRAD_SCALES: ParamScales = ParamScales {
    key: 1.0,
    prompt: 0.5,
    router: 1.0,
    down: 0.5,
    up: 0.5,
};

fn item_input(provider: &dyn Embedder, enc: &FrozenEncoder, q: &Query) -> ItemInput {
    ItemInput {
        embedding: provider.embed(q).unwrap().vector,
        content: enc.tokenize(q, provider).unwrap(),
    }
}

/// Error as a multiple of the tolerance that applied.
fn severity(r: &OracleReport) -> f64 {
    if r.oracle.abs() < FD_ABS_FLOOR {
        r.abs_err / r.tol
    } else {
        r.rel_err / r.tol
    }
}

fn ac1_gradients() -> Outcome {
    let start = Instant::now();
    let d = 8;
    let provider = SyntheticProvider::new(&EmbedderConfig {
        dimension: d,
        ..EmbedderConfig::default()
    })
    .unwrap();
    let mut worst: Option<OracleReport> = None;
    let mut failures = 0;
    let mut coords = 0;
    let mut forward_err: f64 = 0.0;
    let mut widened = 0;
    for seed in 0..GRADIENT_SEEDS {
        let cfg = BankConfig {
            dim: d,
            entries: 4,
            select: 2 + (seed % 2) as usize,
            experts: 2,
            rank: 2,
            top_experts: 1 + ((seed / 2) % 2) as usize,
        };
        let flat = random_flat(&cfg, &mut rng(1000 + seed), GRAD_SCALES);
        let mut bank = PromptBank::init(cfg, seed).unwrap();
        bank.set_flat_params(&flat).unwrap();
        let triplets: Vec<Triplet> = (0..3)
            .map(|t| Triplet {
                anchor: Query::synthetic(format!("a{t}"), Style::Sketch, seed + t, 1),
                positive: Query::synthetic(format!("p{t}"), Style::Text, seed + t, 0),
                negative: Query::synthetic(format!("n{t}"), Style::Image, seed + t + 7, 0),
            })
            .collect();
        let tcfg = TrainConfig::default();
        for insertion in [Insertion::Shallow, Insertion::Deep] {
            let enc = FrozenEncoder::new(EncoderConfig {
                layers: 2,
                dim: d,
                insertion,
                token_num: 2,
                max_len: 6,
                seed,
                ..EncoderConfig::default()
            })
            .unwrap();
            let objective = Objective::new(&provider, &enc, tcfg).unwrap();
            let (loss, tape) = objective.forward(&triplets, &bank).unwrap();
            let grads = objective.backward(&tape, &bank).unwrap().flat();

            let inputs: Vec<_> = triplets
                .iter()
                .map(|t| {
                    (
                        item_input(&provider, &enc, &t.anchor),
                        item_input(&provider, &enc, &t.positive),
                        item_input(&provider, &enc, &t.negative),
                    )
                })
                .collect();
            let reference = RefEncoder::from_encoder(&enc);
            let oracle_loss =
                oracles::model_loss(&DenseBank::from_flat(&cfg, &flat), &reference, &inputs, tcfg.margin, tcfg.lambda, insertion);
            forward_err = forward_err.max((oracle_loss - loss).abs());

            let narrow = |p: &[f64]| {
                oracles::model_loss_terms(&DenseBank::from_flat(&cfg, p), &reference, &inputs, tcfg.margin, tcfg.lambda, insertion)
            };
            let mut fd = match oracles::fd_gradient_terms(narrow, &flat, FD_STEP) {
                Ok(fd) => fd,
                Err(e) => return outcome("AC1", false, format!("non-finite loss at coordinate {}", e.coordinate)),
            };

            // Small gradients are re-differenced in double-double so the
            // oracle's rounding noise sits far below them.
            let small: Vec<usize> = (0..flat.len())
                .filter(|&i| {
                    let m = grads[i].abs().max(fd[i].abs());
                    m > 0.0 && m < FD_WIDE_BELOW
                })
                .collect();
            let wide_ref: RefEncoder<TwoFloat> = reference.to();
            let wide_inputs: Vec<_> = inputs.iter().map(|(a, p, n)| (a.to(), p.to(), n.to())).collect();
            let wide_flat: Vec<TwoFloat> = flat.iter().map(|&x| TwoFloat::from(x)).collect();
            let wide = |p: &[TwoFloat]| {
                oracles::model_loss_terms(&DenseBank::from_flat(&cfg, p), &wide_ref, &wide_inputs, tcfg.margin, tcfg.lambda, insertion)
            };
            match oracles::fd_partials(wide, &wide_flat, FD_WIDE_STEP, &small) {
                Ok(v) => {
                    for (&i, x) in small.iter().zip(v) {
                        fd[i] = x;
                    }
                }
                Err(e) => return outcome("AC1", false, format!("non-finite loss at coordinate {}", e.coordinate)),
            }
            widened += small.len();
            for (i, (g, f)) in grads.iter().zip(&fd).enumerate() {
                coords += 1;
                let r = OracleReport::relative(format!("seed {seed} {insertion} coord {i}"), *g, *f, FD_REL_TOL, FD_ABS_FLOOR);
                if !r.pass {
                    failures += 1;
                }
                if worst.as_ref().is_none_or(|w| severity(&r) > severity(w)) {
                    worst = Some(r);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let w = worst.unwrap();
    let pass = failures == 0 && forward_err < FORWARD_TOL && secs < GRADIENT_BUDGET_S;
    outcome(
        "AC1",
        pass,
        format!(
            "gradients vs finite differences: {coords} coords ({widened} in double-double), {failures} out of tolerance; worst {} (main {:.3e}, fd {:.3e}, {:.2} of tolerance); forward |Δ| {:.1e}; {secs:.1}s",
            w.case, w.main, w.oracle, severity(&w), forward_err
        ),
    )
}

fn ac2_neutrality() -> Outcome {
    let mut r = rng(2);
    let mut checked = 0;
    let mut adapt_err = 0usize;
    let mut sum_err: f64 = 0.0;
    let mut bad_support = 0usize;
    let mut seed = 0;
    while checked < FRESH_ENTRIES {
        let experts = 1 + (seed % 6) as usize;
        let cfg = BankConfig {
            dim: 4 + (seed % 13) as usize,
            entries: 8,
            select: 2,
            experts,
            rank: 1 + (seed % 3) as usize,
            top_experts: 1 + (seed % 4) as usize % experts,
        };
        let bank = PromptBank::init(cfg, seed).unwrap();
        let want = cfg.top_experts.min(cfg.experts);
        for i in 0..cfg.entries {
            if bank.adapt_prompt(i).unwrap() != bank.entry(i).prompt {
                adapt_err += 1;
            }
            let probes = [bank.entry(i).prompt.clone(), gauss(&mut r, cfg.dim, 1.0)];
            for p in &probes {
                let w = bank.route(i, p).unwrap();
                sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
                if w.iter().filter(|&&x| x != 0.0).count() != want || w.iter().any(|&x| x < 0.0) {
                    bad_support += 1;
                }
            }
            checked += 1;
        }
        seed += 1;
    }
    let pass = adapt_err == 0 && sum_err <= ROUTE_SUM_TOL && bad_support == 0;
    outcome(
        "AC2",
        pass,
        format!(
            "fresh banks: {checked} entries, {adapt_err} adapted prompts differ from base; max |Σw − 1| {sum_err:.1e}; {bad_support} routes with wrong support"
        ),
    )
}

fn ac3_exactness() -> Outcome {
    let d = 16;
    let mut topk_mismatch = 0usize;
    let mut select_mismatch = 0usize;
    let mut comparisons = 0usize;
    for case in 0..EXACTNESS_CASES {
        let mut r = rng(30_000 + case);
        let mut items: Vec<(String, Vec<f64>)> = (0..40).map(|i| (format!("doc-{:02}", (i * 17) % 40), unit(&mut r, d))).collect();
        for j in 0..3 {
            let src = items[j * 5].1.clone();
            items[30 + j].1 = src;
        }
        let idx = VecIndex::build(
            d,
            items.iter().map(|(id, v)| CorpusItem {
                id: id.clone(),
                style: Style::Image,
                content: String::new(),
                embedding: v.clone(),
                metadata: BTreeMap::new(),
            }),
        )
        .unwrap();

        let cfg = BankConfig {
            dim: d,
            entries: 24,
            ..BankConfig::default()
        };
        let mut bank = PromptBank::init(cfg, case).unwrap();
        let dup = bank.entry(3).key.clone();
        bank.entry_mut(20).key = dup;
        let keys: Vec<Vec<f64>> = bank.entries().iter().map(|e| e.key.clone()).collect();

        for _ in 0..EXACTNESS_QUERIES {
            let q = gauss(&mut r, d, 1.0);
            for k in EXACTNESS_K {
                comparisons += 1;
                let ev = idx.top_k(&q, k).unwrap();
                let want = oracles::exhaustive_topk(&items, &q, k);
                let same = ev.len() == want.len()
                    && ev
                        .items
                        .iter()
                        .zip(&want)
                        .all(|(e, (id, s))| e.item.id == *id && (e.score - s).abs() <= SCORE_TOL);
                if !same {
                    topk_mismatch += 1;
                }
                if bank.select(&q, k).unwrap().indices != oracles::select_exhaustive(&keys, &q, k) {
                    select_mismatch += 1;
                }
            }
        }
    }
    outcome(
        "AC3",
        topk_mismatch == 0 && select_mismatch == 0,
        format!("exhaustive scans: {comparisons} top-k and {comparisons} selections, {topk_mismatch} and {select_mismatch} mismatches"),
    )
}

struct DefaultRun {
    bench: Bench,
    sys: SystemConfig,
    system: TrainedSystem,
    untrained: RecallReport,
    trained: RecallReport,
    secs: f64,
}

fn full_run(sys_edit: impl FnOnce(&mut SystemConfig)) -> DefaultRun {
    let start = Instant::now();
    let bench = gen_bench(&SynthBenchConfig::default()).unwrap();
    let mut sys = SystemConfig::for_bench(&bench);
    sys_edit(&mut sys);
    let system = train_system(&bench, &sys).unwrap();
    let untrained = run_grid(&system.untrained, &bench).unwrap();
    let trained = run_grid(&system.trained, &bench).unwrap();
    DefaultRun {
        bench,
        sys,
        system,
        untrained,
        trained,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn baseline_of(run: &DefaultRun) -> Value {
    let h = &run.system.history;
    json!({
        "provenance": {
            "oracle": "seeded default training run",
            "seed": run.sys.trainer.seed,
            "generator": "PROMPTRAG_WRITE_BASELINE=1 cargo test -p promptrag --test acceptance",
        },
        "first_epoch_loss": h.first().map(|r| r.mean_loss),
        "final_epoch_loss": h.last().map(|r| r.mean_loss),
        "untrained_off_diagonal_r1": run.untrained.off_diagonal_mean_r1(),
        "trained_off_diagonal_r1": run.trained.off_diagonal_mean_r1(),
        "bank_checksum": format!("{:08x}", run.system.trained.bank().checksum()),
    })
}

fn ac4_training(run: &DefaultRun) -> Vec<Outcome> {
    let h = &run.system.history;
    let (first, last) = (h.first().unwrap().mean_loss, h.last().unwrap().mean_loss);
    let ratio = last / first;
    let a = outcome(
        "AC4a",
        ratio <= LOSS_RATIO_TARGET,
        format!("loss {first:.4} → {last:.4} over {} epochs, ratio {ratio:.3} (target ≤ {LOSS_RATIO_TARGET})", h.len()),
    );

    let (u, t) = (run.untrained.off_diagonal_mean_r1(), run.trained.off_diagonal_mean_r1());
    let current = baseline_of(run);
    let path = fixture_path(BASELINE_FIXTURE);
    if std::env::var("PROMPTRAG_WRITE_BASELINE").as_deref() == Ok("1") {
        fs::write(&path, serde_json::to_string_pretty(&current).unwrap() + "\n").unwrap();
    }
    let baseline = match fs::read_to_string(&path) {
        Ok(text) => {
            let pinned: Value = serde_json::from_str(&text).unwrap();
            let nums = [
                "first_epoch_loss",
                "final_epoch_loss",
                "untrained_off_diagonal_r1",
                "trained_off_diagonal_r1",
            ];
            let drift: Vec<&str> = nums
                .iter()
                .copied()
                .filter(|k| {
                    let (a, b) = (pinned[*k].as_f64(), current[*k].as_f64());
                    !matches!((a, b), (Some(a), Some(b)) if (a - b).abs() <= BASELINE_TOL)
                })
                .collect();
            if drift.is_empty() && pinned["bank_checksum"] == current["bank_checksum"] {
                Ok(())
            } else {
                Err(format!("drift from pinned baseline in {drift:?}"))
            }
        }
        Err(_) => Err(format!("baseline fixture {BASELINE_FIXTURE} missing")),
    };
    let pass = t > u && baseline.is_ok() && run.secs < TRAINING_BUDGET_S;
    let b = outcome(
        "AC4b",
        pass,
        format!(
            "off-diagonal R@1 {u:.4} → {t:.4} (margin {:+.4}); baseline {}; train + grids {:.1}s",
            t - u,
            baseline.err().unwrap_or_else(|| "matches".into()),
            run.secs
        ),
    );
    vec![a, b]
}

fn ac5_fused(run: &DefaultRun) -> Outcome {
    let (fused, comp) = (run.trained.fused_mean_r1(), run.trained.fused_component_mean_r1());
    let regressions = run.trained.fused_regressions();
    let mut detail = format!(
        "fused R@1 {fused:.4} vs component single-style R@1 {comp:.4}; {} per-cell regressions",
        regressions.len()
    );
    for (cell, f, best) in &regressions {
        detail.push_str(&format!("\n       {:?} → {}: fused {f:.4} < best component {best:.4}", cell.query, cell.target));
    }
    outcome("AC5", fused >= comp, detail)
}

fn ac6_insertion(run: &DefaultRun) -> Outcome {
    let bench = &run.bench;
    let one_layer = |insertion: Insertion| {
        let mut sys = SystemConfig::for_bench(bench);
        sys.encoder.layers = 1;
        sys.encoder.insertion = insertion;
        let s = train_system(bench, &sys).unwrap();
        (
            run_grid(&s.untrained, bench).unwrap(),
            run_grid(&s.trained, bench).unwrap(),
        )
    };
    let (su, st) = one_layer(Insertion::Shallow);
    let (du, dt) = one_layer(Insertion::Deep);
    let same = su.grid == du.grid && st.grid == dt.grid;

    let mut sys = run.sys.clone();
    let default_mode = sys.encoder.insertion;
    sys.encoder.insertion = match default_mode {
        Insertion::Deep => Insertion::Shallow,
        Insertion::Shallow => Insertion::Deep,
    };
    let other = train_system(bench, &sys).unwrap();
    let other_r1 = run_grid(&other.trained, bench).unwrap().off_diagonal_mean_r1();
    let default_r1 = run.trained.off_diagonal_mean_r1();
    let finite = other_r1.is_finite() && default_r1.is_finite();
    outcome(
        "AC6",
        same && finite,
        format!(
            "L=1 shallow and deep grids {}; L={} off-diagonal R@1 {default_mode} {default_r1:.4}, {} {other_r1:.4}",
            if same { "identical" } else { "differ" },
            run.sys.encoder.layers,
            sys.encoder.insertion
        ),
    )
}

fn ac7_determinism(run: &DefaultRun) -> Outcome {
    let again = full_run(|_| {});
    let (a, b) = (run.system.trained.bank().checksum(), again.system.trained.bank().checksum());
    let csv_same = run.trained.to_csv() == again.trained.to_csv();
    let enc_fresh = FrozenEncoder::new(run.sys.encoder).unwrap().param_checksum();
    let prov_fresh = SyntheticProvider::new(&run.sys.embedder).unwrap().param_checksum();
    let frozen = [&run.system.trained, &run.system.untrained, &again.system.trained].iter().all(|r: &&Retriever| {
        r.encoder().param_checksum() == enc_fresh && r.provider().param_checksum() == prov_fresh
    });
    outcome(
        "AC7",
        a == b && csv_same && frozen,
        format!(
            "bank checksums {a:08x} / {b:08x}; recall CSV {}; encoder {enc_fresh:08x} and embedder {prov_fresh:08x} {}",
            if csv_same { "identical" } else { "differs" },
            if frozen { "unchanged" } else { "changed" }
        ),
    )
}

fn flip_detected(path: &Path, at: usize, mask: u8, load: &dyn Fn() -> bool) -> bool {
    let original = fs::read(path).unwrap();
    let mut bytes = original.clone();
    let at = at % bytes.len();
    bytes[at] ^= mask;
    fs::write(path, &bytes).unwrap();
    let detected = !load();
    fs::write(path, &original).unwrap();
    detected
}

fn ac8_persistence(run: &DefaultRun) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (bank_dir, index_dir) = (dir.path().join("bank"), dir.path().join("index"));

    let bank = run.system.trained.bank();
    bank.save(&bank_dir).unwrap();
    let loaded = PromptBank::load(&bank_dir).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let bank_ok = bits(loaded.flat_params()) == bits(bank.flat_params()) && loaded.checksum() == bank.checksum();

    let mut r = rng(8);
    let items: Vec<CorpusItem> = (0..64)
        .map(|i| CorpusItem {
            id: format!("item-{i:03}"),
            style: [Style::Text, Style::Sketch, Style::Art][i % 3],
            content: format!("content {i}\nline two"),
            embedding: unit(&mut r, 16),
            metadata: BTreeMap::from([("group".to_string(), (i % 5).to_string())]),
        })
        .collect();
    let idx = VecIndex::build(16, items).unwrap();
    idx.save(&index_dir).unwrap();
    let back = VecIndex::load(&index_dir).unwrap();
    let index_ok = back.checksum() == idx.checksum()
        && back.items().len() == idx.items().len()
        && back.items().iter().zip(idx.items()).all(|(a, b)| {
            a.id == b.id
                && a.style == b.style
                && a.content == b.content
                && a.metadata == b.metadata
                && bits(a.embedding.clone()) == bits(b.embedding.clone())
        });

    let load_bank = || PromptBank::load(&bank_dir).is_ok();
    let load_index = || VecIndex::load(&index_dir).is_ok();
    let (params, embeddings, metadata) = (
        bank_dir.join("params.f64"),
        index_dir.join("embeddings.f64"),
        index_dir.join("metadata.ndjson"),
    );
    let targets: [(&Path, &dyn Fn() -> bool); 3] = [
        (&params, &load_bank),
        (&embeddings, &load_index),
        (&metadata, &load_index),
    ];
    let mut missed = Vec::new();
    for case in 0..CORRUPTION_CASES {
        let (path, load) = targets[case % targets.len()];
        let at = r.random_range(0..usize::MAX);
        let mask: u8 = r.random_range(1..=255);
        if !flip_detected(path, at, mask, load) {
            missed.push(format!("{}@{}", path.file_name().unwrap().to_string_lossy(), at));
        }
    }
    let clean = load_bank() && load_index();
    outcome(
        "AC8",
        bank_ok && index_ok && missed.is_empty() && clean,
        format!(
            "round trips bank {} index {}; {CORRUPTION_CASES} single-byte flips, {} undetected {:?}",
            if bank_ok { "bit-exact" } else { "differ" },
            if index_ok { "bit-exact" } else { "differ" },
            missed.len(),
            missed
        ),
    )
}

const WORDS: &[&str] = &[
    "sketch", "river", "mountain", "castle", "painting", "lion", "harbor", "forest", "violin", "bridge", "storm", "garden",
    "lantern", "desert", "glacier", "tower", "falcon", "meadow", "anchor", "comet", "PROMPT:", "EVIDENCE:", "QUERY:", "\\",
];

fn random_text(r: &mut impl Rng, provider: &dyn Embedder, newlines: bool) -> String {
    loop {
        let n = r.random_range(1..12);
        let mut s = String::new();
        for i in 0..n {
            if i > 0 {
                s.push(if newlines && r.random_bool(0.2) { '\n' } else { ' ' });
            }
            s.push_str(WORDS[r.random_range(0..WORDS.len())]);
        }
        if provider.embed(&Query::text("probe", Style::Text, s.clone()).unwrap()).is_ok() {
            return s;
        }
    }
}

fn ac9_rag() -> Outcome {
    let d = 16;
    let provider = build_embedder(&EmbedderConfig {
        dimension: d,
        provider: ProviderKind::HashedText,
        ..EmbedderConfig::default()
    })
    .unwrap();
    let bank = PromptBank::init(
        BankConfig {
            dim: d,
            ..BankConfig::default()
        },
        42,
    )
    .unwrap();
    let enc = FrozenEncoder::new(EncoderConfig {
        dim: d,
        ..EncoderConfig::default()
    })
    .unwrap();
    let retriever = Retriever::new(provider.clone(), Arc::new(bank), Arc::new(enc)).unwrap();
    let backend = EchoBackend::new();
    let no_sleep = |_| {};

    let (mut unstable, mut misordered, mut mismatched, mut full_cases) = (0, 0, 0, 0);
    for case in 0..RAG_CASES {
        let mut r = rng(90_000 + case);
        let n = r.random_range(1..12);
        let mut idx = VecIndex::new(d);
        for i in 0..n {
            let text = random_text(&mut r, provider.as_ref(), true);
            let q = Query::text(format!("doc-{i:02}"), Style::Text, text.clone()).unwrap();
            idx.add(retriever.corpus_item(&q, text, BTreeMap::new()).unwrap()).unwrap();
        }
        let q = Query::text("query", Style::Text, random_text(&mut r, provider.as_ref(), true)).unwrap();
        let prompt = SystemPrompt::new("case", 1, random_text(&mut r, provider.as_ref(), true)).unwrap();
        let cfg = RagConfig {
            k: r.random_range(1..10),
            char_budget: r.random_range(0..900),
            ..RagConfig::default()
        };
        let a = answer(&q, &retriever, &idx, &prompt, &cfg, &backend, &no_sleep).unwrap();
        let b = answer(&q, &retriever, &idx, &prompt, &cfg, &backend, &no_sleep).unwrap();
        if a.result.text != b.result.text || a.evidence.ids() != b.evidence.ids() || a.result.text != a.context.rendered {
            unstable += 1;
        }
        let lines: Vec<&str> = a.context.rendered.lines().collect();
        let at = |h: &str| lines.iter().enumerate().filter(|(_, l)| **l == h).map(|(i, _)| i).collect::<Vec<_>>();
        let (p, e, qh) = (at(PROMPT_HEADER), at(EVIDENCE_HEADER), at(QUERY_HEADER));
        if !(p.len() == 1 && e.len() == 1 && qh.len() == 1 && p[0] < e[0] && e[0] < qh[0]) {
            misordered += 1;
        }
        let kept = a.context.evidence_section.len();
        let returned = a.evidence.ids();
        let rendered_ok = kept + a.context.dropped == returned.len()
            && a.context.evidence_ids() == returned[..kept].to_vec()
            && (a.context.dropped > 0 || a.context.evidence_ids() == returned);
        if a.context.dropped == 0 {
            full_cases += 1;
        }
        if !rendered_ok {
            mismatched += 1;
        }
    }
    outcome(
        "AC9",
        unstable == 0 && misordered == 0 && mismatched == 0,
        format!(
            "{RAG_CASES} echo cases: {unstable} nondeterministic, {misordered} out of section order, {mismatched} rendered/returned evidence mismatches ({full_cases} with nothing dropped)"
        ),
    )
}

fn ac10_defaults() -> Outcome {
    let text = match fs::read_to_string(fixture_path(DEFAULTS_FIXTURE)) {
        Ok(t) => t,
        Err(e) => return outcome("AC10", false, format!("{DEFAULTS_FIXTURE}: {e}")),
    };
    let manifest: Value = serde_json::from_str(&text).unwrap();
    let defaults = serde_json::to_value(RunConfig::default()).unwrap();
    let resolved = serde_json::to_value(resolve(&Sources::default()).unwrap()).unwrap();
    let mut wrong = Vec::new();
    let mut checked = 0;
    for (section, fields) in manifest["defaults"].as_object().unwrap() {
        for (field, want) in fields.as_object().unwrap() {
            checked += 1;
            for (label, cfg) in [("default", &defaults), ("resolved", &resolved)] {
                let got = &cfg[section][field];
                let same = match (got.as_f64(), want.as_f64()) {
                    (Some(a), Some(b)) => a == b,
                    _ => got == want,
                };
                if !same {
                    wrong.push(format!("{label} {section}.{field} = {got}, pinned {want}"));
                }
            }
        }
    }
    outcome(
        "AC10",
        wrong.is_empty() && checked > 0,
        format!("{checked} pinned defaults checked; mismatches {wrong:?}"),
    )
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let mut report = |o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let known = if KNOWN_RED.contains(&o.id) {
            if o.pass {
                " (listed as known red but passed)"
            } else {
                " (known red)"
            }
        } else {
            ""
        };
        println!("[{tag}] {:<5} {}{known}", o.id, o.detail);
        results.push(o);
    };

    // Optional filter, e.g. `cargo test --test acceptance -- AC1 AC8`.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let want = |id: &str| only.is_empty() || only.iter().any(|o| o == id);

    if want("AC1") {
        report(ac1_gradients());
    }
    if want("AC2") {
        report(ac2_neutrality());
    }
    if want("AC3") {
        report(ac3_exactness());
    }
    if ["AC4", "AC5", "AC6", "AC7", "AC8"].iter().any(|id| want(id)) {
        let run = full_run(|_| {});
        if want("AC4") {
            for o in ac4_training(&run) {
                report(o);
            }
        }
        if want("AC5") {
            report(ac5_fused(&run));
        }
        if want("AC6") {
            report(ac6_insertion(&run));
        }
        if want("AC7") {
            report(ac7_determinism(&run));
        }
        if want("AC8") {
            report(ac8_persistence(&run));
        }
    }
    if want("AC9") {
        report(ac9_rag());
    }
    if want("AC10") {
        report(ac10_defaults());
    }

    let blocking: Vec<&str> = results
        .iter()
        .filter(|o| !o.pass && !KNOWN_RED.contains(&o.id))
        .map(|o| o.id)
        .collect();
    let passed = results.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} passed; blocking failures {blocking:?}", results.len());
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
