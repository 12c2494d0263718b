use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tica_cli::{commands, Method, RunConfig};

#[derive(Parser)]
#[command(name = "tica", version, about = "Template ICA experiments on simulated cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw training and test cohorts with their ground truth.
    Simulate(Common),
    /// Estimate the template from the training cohort.
    BuildTemplate(Common),
    /// Fit every test scan with one method.
    Fit(Common),
    /// Score the fits against the truth.
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TICA_LOG", "warn")).init();
    let cli = Cli::parse();
    let (args, action): (Common, fn(&RunConfig) -> tica_cli::Result<()>) = match cli.command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::BuildTemplate(a) => (a, commands::build_template),
        Command::Fit(a) => (a, commands::fit),
        Command::Evaluate(a) => (a, commands::evaluate),
    };
    let result = RunConfig::load(&args.config, args.seed, args.method, args.out, args.threads).and_then(|c| action(&c));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
