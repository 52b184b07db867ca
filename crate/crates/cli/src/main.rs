//! `mfdakt`: command-line driver for the knowledge-tracing pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kt_core::KtError;
use kt_engine::{suite, EngineError, GradCheckConfig};

use config::{Overrides, RunConfig};
use stages::EmbeddingSource;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }

    pub fn from_engine(e: EngineError) -> Self {
        Self::from(KtError::Engine(e))
    }
}

impl From<KtError> for Failure {
    fn from(e: KtError) -> Self {
        let m = e.to_string();
        match e {
            KtError::Config(_) => Failure::Usage(m),
            KtError::Divergence(_) | KtError::Engine(EngineError::NonFinite { .. }) => Failure::Numerical(m),
            _ => Failure::Data(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mfdakt", version, about = "Knowledge tracing from interaction logs")]
struct Cli {
    /// Flat TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads for parallel fold runs; 1 is fully deterministic.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Skip malformed log rows instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
    /// Comma-separated ablation flags, e.g. `r_recent,r_pre`.
    #[arg(long, global = true)]
    ablate: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and filter the log, then split students into folds.
    Ingest,
    /// Build question similarity and fold difficulty.
    BuildGraph,
    /// Pre-train both question-embedding subspaces.
    Pretrain,
    /// Fine-tune on one fold and report its test metrics.
    Train,
    /// Evaluate a trained model on its test fold.
    Eval,
    /// Train and evaluate every ablation variant on the listed folds.
    Ablate,
    /// Dump per-record attention scores of a trained model.
    Explain,
    /// Write a synthetic log and its ground-truth probabilities.
    Synth,
    /// Write question embeddings as text.
    ExportEmbeddings {
        #[arg(long, value_enum, default_value = "pretrain")]
        source: EmbeddingSource,
    },
    /// Finite-difference check of every engine op and the full loss.
    GradCheck,
    /// Print the resolved configuration.
    ShowConfig,
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn grad_check() -> Result<(), Failure> {
    let cfg = GradCheckConfig::default();
    let mut worst: f64 = 0.0;
    for (name, err) in suite::check_all_ops(&[1, 2, 3], cfg).map_err(Failure::from_engine)? {
        println!("{name:<16} {err:.3e}");
        worst = worst.max(err);
    }
    let full = kt_core::harness::check_full_loss(8, GradCheckConfig { samples_per_param: 40, ..cfg })?;
    println!("{:<16} {:.3e}", "full_loss_d8", full.max_rel_error);
    if let Some((param, index)) = &full.worst {
        println!("  worst at {param}[{index}]: analytic {:.6e} numeric {:.6e}", full.analytic, full.numeric);
    }
    worst = worst.max(full.max_rel_error);
    if worst < GRAD_TOLERANCE {
        println!("all checks below {GRAD_TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure::Numerical(format!("max relative error {worst:.3e} exceeds {GRAD_TOLERANCE:e}")))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = Overrides {
        config: cli.config,
        set: cli.set,
        workers: cli.workers,
        lenient: cli.lenient,
        ablate: cli.ablate,
    };
    let config = RunConfig::resolve(&overrides)?;
    let dir = match cli.command {
        Command::GradCheck => return grad_check(),
        Command::ShowConfig => {
            print!("{}", config.to_toml());
            return Ok(());
        }
        Command::Synth => stages::run_synth(&config)?,
        Command::Ingest => stages::run_ingest(&config)?.dir,
        Command::BuildGraph => stages::run_graph(&config)?.dir,
        Command::Pretrain => stages::run_pretrain(&config)?.dir,
        Command::Train => stages::run_train(&config)?.dir,
        Command::Eval => stages::run_eval(&config)?.dir,
        Command::Ablate => stages::run_ablate(&config)?.dir,
        Command::Explain => stages::run_explain(&config)?.dir,
        Command::ExportEmbeddings { source } => stages::run_export(&config, source)?.dir,
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
