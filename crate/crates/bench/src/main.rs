use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use potential_bench::{configure_threads, parse_config, run_all, run_experiment, BenchError, Experiment};

const COMMANDS: [&str; 8] = [
    "solve-dirichlet",
    "solve-neumann",
    "flatness-report",
    "spectrum",
    "lipgraph-build",
    "good-lambda",
    "convergence-study",
    "run",
];

/// Layer-potential workbench.
///
/// `run` executes the config's `experiments` list, one subdirectory each.
/// Exit codes: 0 success, 1 computation error, 2 config error, 3 I/O error.
#[derive(Parser, Debug)]
#[command(name = "potential-bench", version)]
struct Cli {
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(COMMANDS))]
    command: String,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("potential-bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<(), BenchError> {
    configure_threads()?;
    let cfg = parse_config(&cli.config)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.clone());
    let outputs = match Experiment::parse(&cli.command) {
        Some(e) => vec![run_experiment(&cfg, e, &out)?],
        None => run_all(&cfg, &out)?,
    };
    for o in outputs {
        for f in o.files {
            println!("{}", f.display());
        }
    }
    Ok(())
}
