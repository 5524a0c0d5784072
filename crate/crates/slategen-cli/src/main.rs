//! Command line front end. Usage mistakes exit with clap's code 2; runtime
//! failures print one machine-readable JSON record to stderr and exit 1.

use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slategen::harness::{flops_table, read_reports, Experiment, HarnessConfig};
use slategen::training::Phase;

#[derive(Parser)]
#[command(name = "slategen", version, about = "Generative slate auction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic auction world into the out directory.
    GenData {
        /// Config file of `key = value` lines; unset keys take defaults.
        #[arg(long)]
        config: PathBuf,
        /// Directory that receives every artifact of this run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train embeddings and the sequence encoder on logged exposures.
    Pretrain(PhaseArgs),
    /// Train the slate evaluator on exposed slates, encoder frozen.
    TrainReward(PhaseArgs),
    /// Train the slot allocator against marginal-contribution rewards.
    Rlaf(PhaseArgs),
    /// Train the payment head under the regret-penalized revenue objective.
    TrainPayment(PhaseArgs),
    /// Measure the test split under the newest checkpoint, or under fresh
    /// weights when nothing has trained yet.
    Evaluate(PhaseArgs),
    /// Print the closed-form versus measured FLOPs table for a config
    /// without touching any trained weights.
    Flops {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pretty-print the stored phase reports from an out directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PhaseArgs {
    /// Out directory produced by gen-data.
    #[arg(long)]
    out: PathBuf,
    /// Optional config cross-check; must equal the one the world was
    /// generated from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training-stream seed without regenerating the world.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &PhaseArgs) -> Result<Experiment, Box<dyn Error>> {
    let cfg = args.config.as_deref().map(HarnessConfig::from_file).transpose()?;
    Ok(Experiment::load_checked(&args.out, cfg.as_ref(), args.seed)?)
}

/// Prints to stdout, treating a closed pipe as a normal exit rather than a
/// panic so `slategen ... | head` behaves.
fn emit(text: &str) -> Result<(), Box<dyn Error>> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run_phase(args: &PhaseArgs, phase: Phase) -> Result<(), Box<dyn Error>> {
    let report = load(args)?.run_phase(phase)?;
    emit(&serde_json::to_string_pretty(&report)?)
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = HarnessConfig::from_file(&config)?;
            let exp = Experiment::generate(&cfg, &out)?;
            let summary = serde_json::json!({
                "out": out,
                "bayes_auc": exp.artifacts().world.bayes_auc,
                "ads": cfg.n_total,
                "users": cfg.n_users,
                "requests": cfg.requests_train + cfg.requests_val + cfg.requests_test,
            });
            emit(&summary.to_string())?;
        }
        Command::Pretrain(args) => run_phase(&args, Phase::Pretrain)?,
        Command::TrainReward(args) => run_phase(&args, Phase::Reward)?,
        Command::Rlaf(args) => run_phase(&args, Phase::Rlaf)?,
        Command::TrainPayment(args) => run_phase(&args, Phase::Payment)?,
        Command::Evaluate(args) => {
            let report = load(&args)?.evaluate()?;
            emit(&serde_json::to_string_pretty(&report)?)?;
        }
        Command::Flops { config } => {
            let cfg = HarnessConfig::from_file(&config)?;
            emit(&serde_json::to_string_pretty(&flops_table(&cfg)?)?)?;
        }
        Command::Report { out } => {
            let reports = read_reports(&out)?;
            emit(&serde_json::to_string_pretty(&reports)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", serde_json::json!({ "error": err.to_string() }));
            ExitCode::FAILURE
        }
    }
}
