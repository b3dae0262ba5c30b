//! Command-line driver: build indices, align embeddings, train, link, and
//! evaluate, all from one TOML run configuration.
//!
//! Logs go to stderr; every data artifact is a file. Failures exit nonzero
//! with a single machine-parsable `error[CODE] message` line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "xlel",
    about = "Cross-lingual entity linking: anchor-title candidate indices and a neural consistency ranker",
    version
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "xlel.toml")]
    config: PathBuf,

    /// Override the config seed (also honored: XLEL_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the English anchor-title index plus merged foreign indices.
    BuildIndex,
    /// Fit the least-squares alignment for one language and save it.
    AlignEmbeddings {
        /// Language code of the foreign table.
        #[arg(long)]
        language: String,
    },
    /// Write IDF-weighted page vectors for every English page.
    EmbedPages,
    /// Train the consistency classifier and save a checkpoint.
    Train,
    /// Decode queries into a decisions file.
    Link {
        /// Query file override (defaults to paths.queries).
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Score a decisions file against gold-labeled queries.
    Evaluate {
        /// Decisions file (defaults to paths.decisions).
        #[arg(long)]
        decisions: Option<PathBuf>,
        /// Gold query file (defaults to paths.queries).
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Where to write the report JSON (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite and print per-node errors.
    GradCheck {
        /// Number of random seeds per node.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .downcast_ref::<xlel_core::Error>()
                .map(|e| e.code())
                .unwrap_or("E_FAIL");
            eprintln!("error[{code}] {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = xlel_core::RunConfig::load(&cli.config)?;
    if let Ok(seed) = std::env::var("XLEL_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| xlel_core::Error::Config(format!("XLEL_SEED not an integer: {seed}")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::BuildIndex => commands::build_index(&cfg),
        Command::AlignEmbeddings { language } => commands::align_embeddings(&cfg, &language),
        Command::EmbedPages => commands::embed_pages(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Link { queries } => commands::link(&cfg, queries.as_deref()),
        Command::Evaluate {
            decisions,
            gold,
            out,
        } => commands::evaluate(&cfg, decisions.as_deref(), gold.as_deref(), out.as_deref()),
        Command::GradCheck { seeds } => commands::grad_check(seeds),
    }
}
