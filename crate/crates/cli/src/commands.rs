use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use promptrag::config::{resolve, RunConfig, Sources};
use promptrag::embedders::{build_embedder, Query};
use promptrag::encoder::FrozenEncoder;
use promptrag::evalharness::{gen_bench, run_ablation, run_grid, train_system, AblationAxis, SystemConfig};
use promptrag::pipeline::Retriever;
use promptrag::promptbank::PromptBank;
use promptrag::rag::{self, ChatCompletionsBackend, EchoBackend, GenerationBackend, ENV_ENDPOINT, ENV_MODEL};
use promptrag::trainer::{train, write_history_csv, Triplet};
use promptrag::vecindex::{EvidenceSet, QueryCache, VecIndex};

use crate::corpus::{parse_style, read_ndjson, write_ndjson, CorpusRecord};
use crate::error::{CliError, Exit};
use crate::{BankArg, BankCmd, Cli, Command, EvalCmd, Format, IndexCmd, QueryInput};

/// Version of the `--format json` output schemas.
const JSON_SCHEMA_VERSION: u32 = 1;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&Sources::from_process(cli.config.clone(), cli.overrides.clone()))?;
    match cli.command {
        Command::Index(c) => index(&cfg, c),
        Command::Train(a) => train_cmd(&cfg, a.data.as_deref(), &a.out),
        Command::Query(a) => query(&cfg, &a.index, &a.bank, &a.input, a.format),
        Command::Rag(a) => rag_cmd(&cfg, &a),
        Command::Eval(c) => eval(&cfg, c),
        Command::Bank(c) => bank(&cfg, c),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_bank(cfg: &RunConfig, arg: &BankArg) -> Result<PromptBank, CliError> {
    let bank = match &arg.bank {
        Some(dir) => PromptBank::load(dir)?,
        None => PromptBank::init(cfg.bank, cfg.trainer.seed)?,
    };
    if bank.config().dim != cfg.embedder.dimension {
        return Err(CliError::new(
            Exit::Config,
            format!(
                "bank dimension {} does not match embedder dimension {}",
                bank.config().dim,
                cfg.embedder.dimension
            ),
        ));
    }
    Ok(bank)
}

fn retriever(cfg: &RunConfig, bank: &BankArg) -> Result<Retriever, CliError> {
    let provider = build_embedder(&cfg.embedder)?;
    let encoder = FrozenEncoder::new(cfg.encoder)?;
    let r = Retriever::new(provider, Arc::new(load_bank(cfg, bank)?), Arc::new(encoder))?;
    Ok(if cfg.index.cache {
        r.with_cache(Arc::new(QueryCache::new()))
    } else {
        r
    })
}

fn index(cfg: &RunConfig, cmd: IndexCmd) -> Result<(), CliError> {
    match cmd {
        IndexCmd::Build { corpus, out, bank } => {
            let records: Vec<CorpusRecord> = read_ndjson(&corpus)?;
            let r = retriever(cfg, &bank)?;
            let mut idx = VecIndex::new(cfg.embedder.dimension);
            for rec in records {
                idx.add(rec.into_item(&r)?)?;
            }
            idx.save(&out)?;
            println!("indexed {} item(s) into {}", idx.len(), out.display());
            Ok(())
        }
        IndexCmd::Add { index, corpus, bank } => {
            let mut idx = VecIndex::load(&index)?;
            let records: Vec<CorpusRecord> = read_ndjson(&corpus)?;
            let r = retriever(cfg, &bank)?;
            let before = idx.len();
            for rec in records {
                idx.add(rec.into_item(&r)?)?;
            }
            idx.save(&index)?;
            println!("added {} item(s); index now holds {}", idx.len() - before, idx.len());
            Ok(())
        }
        IndexCmd::Stats { index } => {
            let idx = VecIndex::load(&index)?;
            println!("count: {}", idx.len());
            println!("dim: {}", idx.dim());
            println!("checksum: {:08x}", idx.checksum());
            Ok(())
        }
    }
}

fn train_cmd(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let triplets: Vec<Triplet> = match data {
        Some(p) => read_ndjson(p)?,
        None => gen_bench(&cfg.eval)?.training_triplets(cfg.trainer.seed),
    };
    let provider = build_embedder(&cfg.embedder)?;
    let encoder = FrozenEncoder::new(cfg.encoder)?;
    let bank = PromptBank::init(cfg.bank, cfg.trainer.seed)?;
    let outcome = train(&triplets, bank, &encoder, provider.as_ref(), &cfg.trainer)?;
    create_dir(out)?;
    outcome.bank.save(out)?;
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    match outcome.history.last() {
        Some(r) => println!("final loss: {:.6} (epoch {})", r.mean_loss, r.epoch),
        None => println!("final loss: n/a (0 epochs)"),
    }
    println!("bank checksum: {:08x}", outcome.bank.checksum());
    Ok(())
}

fn read_query(input: &QueryInput) -> Result<Query, CliError> {
    let text = match (&input.text, &input.file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        (None, None) => return Err(CliError::new(Exit::Config, "give --text or --file")),
    };
    let style = parse_style(&input.style)?;
    Query::text("query", style, text.trim_end_matches('\n')).map_err(|e| CliError::new(Exit::Validation, e.to_string()))
}

#[derive(Serialize)]
struct Hit<'a> {
    rank: usize,
    id: &'a str,
    score: f64,
    style: &'a str,
}

fn hits(ev: &EvidenceSet) -> Vec<Hit<'_>> {
    ev.items
        .iter()
        .map(|e| Hit {
            rank: e.rank,
            id: &e.item.id,
            score: e.score,
            style: e.item.style.as_str(),
        })
        .collect()
}

fn print_table(ev: &EvidenceSet) {
    let w = ev.items.iter().map(|e| e.item.id.len()).max().unwrap_or(2).max(2);
    println!("{:<4}  {:<w$}  {:>9}  style", "rank", "id", "score");
    for h in hits(ev) {
        println!("{:<4}  {:<w$}  {:>9.6}  {}", h.rank, h.id, h.score, h.style);
    }
}

fn query(cfg: &RunConfig, index: &Path, bank: &BankArg, input: &QueryInput, format: Format) -> Result<(), CliError> {
    let idx = VecIndex::load(index)?;
    let q = read_query(input)?;
    let k = input.k.unwrap_or(cfg.index.k);
    let ev = retriever(cfg, bank)?.retrieve(&q, &idx, k)?;
    match format {
        Format::Table => print_table(&ev),
        Format::Json => println!(
            "{}",
            json!({"schema_version": JSON_SCHEMA_VERSION, "k": k, "results": hits(&ev)})
        ),
    }
    Ok(())
}

fn rag_cmd(cfg: &RunConfig, a: &crate::RagArgs) -> Result<(), CliError> {
    let backend: Box<dyn GenerationBackend> = match a.backend {
        crate::Backend::Stub => Box::new(EchoBackend::new()),
        crate::Backend::Live => Box::new(ChatCompletionsBackend::from_env(&cfg.rag).map_err(|e| {
            CliError::new(
                Exit::Config,
                format!("{e}; set {ENV_ENDPOINT} to a chat-completions URL and {ENV_MODEL} to a model name, or use --backend stub"),
            )
        })?),
    };
    let idx = VecIndex::load(&a.index)?;
    let q = read_query(&a.input)?;
    let mut rcfg = cfg.rag.clone();
    rcfg.k = a.input.k.unwrap_or(rcfg.k);
    let prompt = rcfg.prompt()?;
    let r = retriever(cfg, &a.bank)?;
    let ans = rag::answer(&q, &r, &idx, &prompt, &rcfg, backend.as_ref(), &std::thread::sleep)?;
    println!("{}", ans.result.text);
    if a.show_evidence {
        println!();
        println!("evidence ({} retrieved, {} dropped by budget):", ans.evidence.len(), ans.context.dropped);
        print_table(&ans.evidence);
    }
    Ok(())
}

fn system(cfg: &RunConfig, bench: &promptrag::evalharness::Bench) -> SystemConfig {
    let mut sys = SystemConfig {
        embedder: cfg.embedder.clone(),
        bank: cfg.bank,
        encoder: cfg.encoder,
        trainer: cfg.trainer,
    };
    sys.align_to(bench);
    sys
}

fn eval(cfg: &RunConfig, cmd: EvalCmd) -> Result<(), CliError> {
    match cmd {
        EvalCmd::Grid { out, bank } => {
            let bench = gen_bench(&cfg.eval)?;
            let sys = system(cfg, &bench);
            let (retriever, history) = match &bank.bank {
                Some(dir) => {
                    let b = PromptBank::load(dir)?;
                    let provider = build_embedder(&sys.embedder)?;
                    let encoder = FrozenEncoder::new(sys.encoder)?;
                    (Retriever::new(provider, Arc::new(b), Arc::new(encoder))?, None)
                }
                None => {
                    let ts = train_system(&bench, &sys)?;
                    (ts.trained, Some(ts.history))
                }
            };
            let report = run_grid(&retriever, &bench)?;
            create_dir(&out)?;
            write(&out.join("recall.csv"), &report.to_csv())?;
            write(&out.join("recall.md"), &report.to_markdown())?;
            write(&out.join("latency.csv"), &report.latency_csv())?;
            if let Some(h) = &history {
                write_history_csv(&out.join("history.csv"), h)?;
            }
            println!("fingerprint: {}", report.fingerprint);
            println!("diagonal mean R@1: {:.4}", report.diagonal_mean_r1());
            println!("off-diagonal mean R@1: {:.4}", report.off_diagonal_mean_r1());
            println!("off-diagonal mean R@5: {:.4}", report.off_diagonal_mean_r5());
            println!("fused mean R@1: {:.4}", report.fused_mean_r1());
            println!("end-to-end mean latency: {:.3} ms", report.latency.end_to_end.mean_ms);
            Ok(())
        }
        EvalCmd::Ablation { axis, values, out } => {
            let axis: AblationAxis = axis.parse().map_err(|e: String| CliError::new(Exit::Config, e))?;
            let bench = gen_bench(&cfg.eval)?;
            let table = run_ablation(axis, &values, &bench, &system(cfg, &bench))?;
            create_dir(&out)?;
            write(&out.join("ablation.csv"), &table.to_csv())?;
            write(&out.join("ablation.md"), &table.to_markdown())?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        EvalCmd::Bench { out } => {
            let bench = gen_bench(&cfg.eval)?;
            create_dir(&out)?;
            let record = |item: &promptrag::evalharness::BenchItem| CorpusRecord {
                id: item.query.id.clone(),
                style: item.query.style.as_str().to_string(),
                content: item.query.payload.as_text().unwrap_or_default().to_string(),
                payload: None,
                embedding: None,
                metadata: [("concept".to_string(), item.concept.to_string())].into(),
            };
            write_ndjson(&out.join("corpus.ndjson"), bench.corpus.values().flatten().map(record))?;
            write_ndjson(&out.join("queries.ndjson"), bench.queries.values().flatten().map(record))?;
            let triplets = bench.training_triplets(cfg.trainer.seed);
            write_ndjson(&out.join("triplets.ndjson"), &triplets)?;
            println!(
                "wrote {} corpus items, {} queries and {} triplets to {}",
                bench.corpus.values().map(Vec::len).sum::<usize>(),
                bench.queries.values().map(Vec::len).sum::<usize>(),
                triplets.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn bank(cfg: &RunConfig, cmd: BankCmd) -> Result<(), CliError> {
    match cmd {
        BankCmd::Init { out } => {
            let b = PromptBank::init(cfg.bank, cfg.trainer.seed)?;
            b.save(&out)?;
            println!("bank checksum: {:08x}", b.checksum());
            Ok(())
        }
        BankCmd::Inspect { bank, format } => {
            let b = load_bank(cfg, &BankArg { bank })?;
            let c = b.config();
            let norms: Vec<f64> = b.entries().iter().map(|e| promptrag::numkit::norm(&e.key)).collect();
            let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
            let max = norms.iter().copied().fold(0.0, f64::max);
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            let max_up = b
                .entries()
                .iter()
                .flat_map(|e| e.experts.iter())
                .flat_map(|x| x.up.as_slice().iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            match format {
                Format::Json => println!(
                    "{}",
                    json!({
                        "schema_version": JSON_SCHEMA_VERSION,
                        "entries": c.entries,
                        "select": c.select,
                        "experts": c.experts,
                        "rank": c.rank,
                        "top_experts": c.top_experts,
                        "dim": c.dim,
                        "parameter_count": b.parameter_count(),
                        "checksum": format!("{:08x}", b.checksum()),
                        "key_norm": {"min": min, "mean": mean, "max": max},
                        "up_factors_zero": max_up == 0.0,
                        "up_factor_max_abs": max_up,
                    })
                ),
                Format::Table => {
                    println!("entries (N): {}", c.entries);
                    println!("selected per query (n): {}", c.select);
                    println!("experts (K): {}", c.experts);
                    println!("rank (r): {}", c.rank);
                    println!("active experts: {}", c.top_experts);
                    println!("dim (d): {}", c.dim);
                    println!("parameters: {}", b.parameter_count());
                    println!("checksum: {:08x}", b.checksum());
                    println!("key norms: min {min:.4}, mean {mean:.4}, max {max:.4}");
                    if max_up == 0.0 {
                        println!("up factors (B): all zero");
                    } else {
                        println!("up factors (B): max |B| {max_up:.3e}");
                    }
                }
            }
            Ok(())
        }
    }
}
