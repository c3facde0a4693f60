use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coopgen_core::error::ErrorClass;

mod commands;
mod config;

use config::RunConfig;

/// Discriminator-guided MCTS text generation at desk scale.
#[derive(Debug, Parser)]
#[command(name = "coopgen", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for data, checkpoints, samples and reports.
    #[arg(long, global = true, env = "COOPGEN_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a bundled synthetic corpus (train/validation/test/oracle-train).
    MakeData(MakeDataArgs),
    /// Train one model kind (or `all`) on the dataset.
    Train(TrainArgs),
    /// Generate samples with MCTS guided by one discriminator family.
    Generate(GenerateArgs),
    /// Judge sample files with the oracle models.
    Evaluate(EvaluateArgs),
    /// Per-step cost curves and forward-pass accounting.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// polarity2 or topic4.
    #[arg(long)]
    pub generator: Option<String>,
    /// Target directory (default: <out_dir>/data).
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// lm, disc-bi, disc-uni, cclm, oracle-lm, oracle-disc or all.
    pub kind: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Target class; without it, `--n` samples are drawn for every class.
    #[arg(long = "class")]
    pub class: Option<usize>,
    /// bi, uni, gedi or none (LM likelihood only).
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub c_puct: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output JSONL (default: <out_dir>/samples/<family>.jsonl).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Sample files written by `generate`.
    #[arg(required = true)]
    pub samples: Vec<PathBuf>,
    /// Also write accuracy-vs-length curves for every trained discriminator.
    #[arg(long)]
    pub curves: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated families to profile.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub c_puct_sweep: Option<Vec<f64>>,
}

/// Failure of a subcommand, already mapped to its exit code.
pub enum Failure {
    Usage(String),
    Core(coopgen_core::Error),
}

impl From<coopgen_core::Error> for Failure {
    fn from(e: coopgen_core::Error) -> Self {
        Failure::Core(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = Some(dir);
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::MakeData(a) => commands::make_data(&mut cfg, a),
        Command::Train(a) => commands::train(&mut cfg, a),
        Command::Generate(a) => commands::generate(&mut cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
        Command::Bench(a) => commands::bench(&mut cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Data => ExitCode::from(2),
                ErrorClass::Runtime => ExitCode::from(3),
            }
        }
    }
}
