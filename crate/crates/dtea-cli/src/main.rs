use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dtea_cli::commands::{
    cmd_bench, cmd_entropy_report, cmd_export_hypergraph, cmd_run, cmd_selfcheck, RunRequest,
};
use dtea_cli::error::{CliError, CliResult};

/// Deterministic multi-scale fusion pipeline.
#[derive(Debug, Parser)]
#[command(name = "dtea", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline and write stage tensors, hypergraph/entropy JSON,
    /// and a replayable manifest into the output directory.
    Run(RunArgs),
    /// Validate and print a run's hypergraph document.
    ExportHypergraph {
        /// Directory holding a run's artifacts.
        run_dir: PathBuf,
    },
    /// Validate and print a run's channel-entropy document.
    EntropyReport {
        /// Directory holding a run's artifacts.
        run_dir: PathBuf,
    },
    /// Run the oracle-equivalence, gradient, and invariant suites.
    Selfcheck {
        /// Configuration preset: "tiny" or "default".
        #[arg(default_value = "tiny")]
        preset: String,
        /// Multiplier on every comparison tolerance (0 = exact).
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
    },
    /// Time the forward pass and print median/p95 per stage as JSON.
    Bench {
        /// Configuration file; the built-in default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measured repetitions (one extra warmup rep is not measured).
        #[arg(long, default_value_t = 50)]
        reps: usize,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Configuration file (flat key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generate stage inputs from this seed.
    #[arg(long)]
    synthetic: Option<u64>,
    /// Stage 1 input tensor (requires the other three as well).
    #[arg(long)]
    stage_1: Option<PathBuf>,
    /// Stage 2 input tensor.
    #[arg(long)]
    stage_2: Option<PathBuf>,
    /// Stage 3 input tensor.
    #[arg(long)]
    stage_3: Option<PathBuf>,
    /// Stage 4 input tensor.
    #[arg(long)]
    stage_4: Option<PathBuf>,
    /// Re-run a prior run from its manifest instead of fresh flags.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

/// `DTEA_THREADS` caps internal parallelism; 0 or unset picks the
/// automatic thread count.
fn apply_thread_env() -> CliResult<()> {
    let Ok(raw) = std::env::var("DTEA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("DTEA_THREADS must be an integer, got '{raw}'")))?;
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&RunRequest {
            config: args.config,
            synthetic: args.synthetic,
            stages: [args.stage_1, args.stage_2, args.stage_3, args.stage_4],
            replay: args.replay,
            out: args.out,
        }),
        Command::ExportHypergraph { run_dir } => cmd_export_hypergraph(&run_dir),
        Command::EntropyReport { run_dir } => cmd_entropy_report(&run_dir),
        Command::Selfcheck {
            preset,
            tolerance_scale,
        } => cmd_selfcheck(&preset, tolerance_scale),
        Command::Bench { config, reps } => cmd_bench(config.as_deref(), reps),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = apply_thread_env().and_then(|()| dispatch(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
