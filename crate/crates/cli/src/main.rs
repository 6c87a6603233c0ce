//! `promptrag`: build indexes, train prompt banks, query, answer and evaluate.

mod commands;
mod corpus;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "promptrag", version, about = "Prompt-bank retrieval and retrieval-augmented generation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set trainer.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, extend or describe a vector index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Train a prompt bank on triplets.
    Train(TrainArgs),
    /// Retrieve the top-k items for a query.
    Query(QueryArgs),
    /// Retrieve, then generate an answer grounded in the evidence.
    Rag(RagArgs),
    /// Recall grids, ablations and the synthetic bench.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Create or describe a prompt bank.
    #[command(subcommand)]
    Bank(BankCmd),
    /// Print the fully resolved configuration.
    Config,
}

#[derive(Subcommand, Debug)]
enum IndexCmd {
    /// Encode a corpus file into a new index directory.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        bank: BankArg,
    },
    /// Append corpus items to an existing index.
    Add {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        bank: BankArg,
    },
    /// Print item count, dimension and checksum.
    Stats {
        #[arg(long)]
        index: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct BankArg {
    /// Saved bank directory; defaults to a freshly seeded bank.
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// NDJSON triplets `{"anchor", "positive", "negative"}`; defaults to the
    /// synthetic bench's training split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the bank and history.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct QueryInput {
    /// Query text (or a `synth:<concept>:<draw>` reference).
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    text: Option<String>,
    /// Read the query text from a file.
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    style: String,
    /// Results to return; defaults to the config value.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    bank: BankArg,
    #[command(flatten)]
    input: QueryInput,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// Offline echo of the rendered context.
    Stub,
    /// Chat-completions endpoint from PROMPTRAG_LLM_* variables.
    Live,
}

#[derive(Args, Debug)]
struct RagArgs {
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    bank: BankArg,
    #[command(flatten)]
    input: QueryInput,
    #[arg(long, value_enum, default_value_t = Backend::Stub)]
    backend: Backend,
    /// Also print the retrieved evidence.
    #[arg(long)]
    show_evidence: bool,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Train (unless --bank is given) and write the recall grid.
    Grid {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        bank: BankArg,
    },
    /// Train and evaluate once per value of one axis.
    Ablation {
        /// insertion_depth, token_num or bank_size.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `shallow,deep`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic bench as corpus, query and triplet files.
    Bench {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum BankCmd {
    /// Shape, parameter count and key-norm summary of a bank.
    Inspect {
        /// Saved bank directory; defaults to a freshly seeded bank.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Save a freshly seeded bank.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
