//! `adept-lab`: pretrain a small transformer, adapt it with soft prompts or
//! token-offset methods, evaluate, and run the attention and offset probes.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Probe;

const OVERRIDES_HELP: &str = "\
Configuration:
  Every key of the JSON configuration (sections backbone, task, method, run,
  analysis) can be set with a flag of the same dotted name, for example
  --run.steps 500, --method.kind=dept or --analysis.shifts 0,4,8.
  Precedence: flag > --config file > built-in default.
  --seed N is shorthand for --run.seed N.

Environment:
  ADEPT_LAB_THREADS  evaluation threads (default 1; results do not depend on it)

Exit status: 0 success, 1 runtime failure, 2 invalid configuration or arguments.";

#[derive(Parser, Debug)]
#[command(name = "adept-lab", version, about, after_help = OVERRIDES_HELP)]
struct Cli {
    /// Seed for pretraining, method initialisation and minibatch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a backbone on the source tasks and write its checkpoint.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a method on the target task against a frozen backbone.
    Adapt {
        #[arg(long)]
        backbone: PathBuf,
        /// Method checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Metrics report path (stdout when omitted).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Accuracy of a backbone, optionally through an adapted method.
    Eval {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        method: Option<PathBuf>,
        /// Prefix every sequence with N neutral tokens.
        #[arg(long, default_value_t = 0)]
        prepend: usize,
        /// JSON-lines dataset to use instead of the generated target split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention decomposition and offset probes.
    Analyze {
        #[command(subcommand)]
        probe: ProbeCommand,
    },
    /// Bottleneck size and trainable-parameter counts under a budget.
    Budget {
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long = "prompt-len")]
        prompt_len: usize,
        /// Offset positions of the decomposed method; adds its rank and count.
        #[arg(long = "max-len")]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a generated split as JSON lines.
    Data {
        /// Export source task N instead of the target task.
        #[arg(long)]
        source: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    method: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ProbeCommand {
    /// First-layer attention split into prompt bias and scaled content term.
    Decompose(ProbeArgs),
    /// Accuracy under cyclically shifted positional offsets.
    Shift(ProbeArgs),
    /// Mean and variance of |embedding| and |offset| entries.
    Stats(ProbeArgs),
    /// Offset change and accuracy when neutral tokens are prepended.
    Prepend(ProbeArgs),
}

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments.
    Config(String),
    Runtime(adept_lab::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<adept_lab::Error> for CliError {
    fn from(e: adept_lab::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    let (args, mut overrides) = config::extract_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(seed) = cli.seed {
        overrides.insert(0, ("run.seed".into(), seed.to_string()));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Pretrain { out } => commands::pretrain(&cfg, &out),
        Command::Adapt {
            backbone,
            out,
            metrics,
        } => commands::adapt(&cfg, &backbone, &out, metrics.as_deref()),
        Command::Eval {
            backbone,
            method,
            prepend,
            data,
            out,
        } => commands::eval(&cfg, &backbone, method.as_deref(), prepend, data.as_deref(), out.as_deref()),
        Command::Analyze { probe } => {
            let (probe, a) = match probe {
                ProbeCommand::Decompose(a) => (Probe::Decompose, a),
                ProbeCommand::Shift(a) => (Probe::Shift, a),
                ProbeCommand::Stats(a) => (Probe::Stats, a),
                ProbeCommand::Prepend(a) => (Probe::Prepend, a),
            };
            commands::analyze(&cfg, probe, &a.backbone, &a.method, a.data.as_deref(), a.out.as_deref())
        }
        Command::Budget {
            budget,
            dim,
            prompt_len,
            max_len,
            out,
        } => commands::budget(budget, dim, prompt_len, max_len, out.as_deref()),
        Command::Data { source, out } => commands::data(&cfg, source, out.as_ref()),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adept-lab: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
