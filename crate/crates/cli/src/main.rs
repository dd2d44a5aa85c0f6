use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use riemod_cli::{run, Subcommand};

#[derive(Parser)]
#[command(
    name = "riemod",
    version,
    about = "Layerwise Riemannian training, verification and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Train a model and write training.csv, timing.csv and final_params.bin.
    Train(RunArgs),
    /// Run property suites and write verify.txt.
    Verify(RunArgs),
    /// Paired-dataset stability experiment.
    Stability(RunArgs),
    /// Woodbury vs dense metric inversion timings.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn init_logging() {
    let level = std::env::var("RIEMANN_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" | "info" | "debug" => level.as_str(),
        other => {
            eprintln!("RIEMANN_LOG_LEVEL={other} not one of error, info, debug; using info");
            "info"
        }
    };
    env_logger::Builder::new()
        .parse_filters(filter)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let (sub, args) = match cli.command {
        Command::Train(a) => (Subcommand::Train, a),
        Command::Verify(a) => (Subcommand::Verify, a),
        Command::Stability(a) => (Subcommand::Stability, a),
        Command::Bench(a) => (Subcommand::Bench, a),
    };
    match run(sub, &args.config, &args.out, args.seed) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("riemod {}: {e}", sub.name());
            ExitCode::from(e.exit_code())
        }
    }
}
