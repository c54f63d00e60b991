//! `p2net` — the command-line pipeline around the paraphrasing model:
//! `synth` builds a raw corpus, `prepare` ingests and splits it, `train`
//! fits a variant, `generate` decodes from a checkpoint, `evaluate` scores
//! one.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/numeric
//! error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use p2net::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "p2net", version, about = "Prototype-guided response paraphrasing pipeline")]
struct Cli {
    /// TOML or JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic raw corpus (data.json + dialogue_acts.json).
    Synth(SynthArgs),
    /// Ingest raw dialogues into records, paraphrase sets and splits.
    Prepare(PrepareArgs),
    /// Train a model variant on a prepared corpus.
    Train(TrainArgs),
    /// Decode responses from a checkpoint.
    Generate(GenerateArgs),
    /// Score a checkpoint on an evaluation split.
    Evaluate(EvaluateArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Output directory (default: <data dir>/raw).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    dialogues: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct PrepareArgs {
    /// Directory holding data.json and dialogue_acts.json (default: <data dir>/raw).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory (default: <data dir>/prepared).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the split seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Prepared corpus directory (default: <data dir>/prepared).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint/log directory (default: <data dir>/checkpoints/<variant>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model variant; see --help for the list.
    #[arg(long)]
    variant: Option<String>,
    /// Stop after this many iterations (overrides the config).
    #[arg(long)]
    max_iters: Option<usize>,
    /// Train on the single paraphrase set with this key (smoke tests).
    #[arg(long)]
    overfit_set: Option<String>,
    /// Overrides the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared corpus directory (default: <data dir>/prepared).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Which split to decode.
    #[arg(long, default_value = "test_seen")]
    split: String,
    /// Output JSONL file (default: <data dir>/reports/generations_<strategy>_<split>.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    /// Samples per instance for the sampling strategies.
    #[arg(long)]
    n: Option<usize>,
    /// Beam width for the beam-family strategies.
    #[arg(long)]
    beam: Option<usize>,
    /// Group count for diverse beam search.
    #[arg(long)]
    groups: Option<usize>,
    /// Between-group repetition penalty for diverse beam search.
    #[arg(long)]
    gamma: Option<f64>,
    /// Dirichlet concentration for prototype-weight sampling.
    #[arg(long)]
    alpha: Option<f64>,
    /// Copy-gate threshold for greedy decoding.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decode with the zero noise vector (the likelihood-style mode).
    #[arg(long)]
    zero_noise: bool,
    /// Read instances (context + template JSON records) from stdin and
    /// print the paraphrase surfaces instead of touching the corpus.
    #[arg(long)]
    interactive: bool,
    /// Cap the number of instances decoded.
    #[arg(long)]
    max_instances: Option<usize>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "generations", conflicts_with = "generations")]
    checkpoint: Option<PathBuf>,
    /// Score an existing generation JSONL (diversity metrics only) instead
    /// of decoding from a checkpoint.
    #[arg(long)]
    generations: Option<PathBuf>,
    /// Prepared corpus directory (default: <data dir>/prepared).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Which split to score.
    #[arg(long, default_value = "test_seen")]
    split: String,
    /// Report JSON path (default: <data dir>/reports/eval_<variant>_<split>.json).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the number of instances scored.
    #[arg(long)]
    max_instances: Option<usize>,
}

/// Usage problems exit 1, bad or missing data exits 2, and numeric failures
/// during a run exit 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::InvalidInput(m) if m.contains("non-finite") => 3,
        Error::InvalidInput(_) => 2,
        Error::Corpus(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Some(workers) = cli.workers {
        // Ignore the error if a pool already exists; that only happens in
        // tests driving main() twice.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global();
    }

    let result = config::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Synth(args) => commands::synth(&cfg, &args),
        Command::Prepare(args) => commands::prepare(&cfg, &args),
        Command::Train(args) => commands::train(&cfg, &args),
        Command::Generate(args) => commands::generate(&cfg, &args),
        Command::Evaluate(args) => commands::evaluate(&cfg, &args),
    });

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
