//! Scenario-driven command line for stochastic vector bundle experiments.

mod config;
mod report;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "svb",
    version,
    about = "Contact dynamics, kinetic equations, and transport experiments on stochastic vector bundles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $SVB_OUT_DIR/<name> or runs/<name>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-assertion output
    #[arg(long)]
    quiet: bool,
    /// Worker threads for parallel sections (results are identical for
    /// any worker count)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a contact flow and its constraint series
    Flow(RunArgs),
    /// Evolve a grid density under the kinetic generator
    Kinetic(RunArgs),
    /// Solve for a stationary second-order density
    Stationary(RunArgs),
    /// Sample a path ensemble and estimate coefficients
    Estimate(RunArgs),
    /// Loop transport and path-dependence experiments
    Holonomy(RunArgs),
    /// Discrete action, stationarity, and descent
    Action(RunArgs),
    /// Run the built-in invariant battery
    Invariants(RunArgs),
    /// List scenario files in a directory
    List {
        /// Directory containing *.toml scenarios
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind_name, args) = match &cli.command {
        Command::Flow(a) => ("flow", a),
        Command::Kinetic(a) => ("kinetic", a),
        Command::Stationary(a) => ("stationary", a),
        Command::Estimate(a) => ("estimate", a),
        Command::Holonomy(a) => ("holonomy", a),
        Command::Action(a) => ("action", a),
        Command::Invariants(a) => ("invariants", a),
        Command::List { dir } => {
            return match runner::list_scenarios(dir) {
                Ok(summaries) => {
                    for s in summaries {
                        match (s.kind, s.error) {
                            (Some(kind), _) => {
                                println!("{}  {}  {}", s.name, kind.as_str(), s.path.display())
                            }
                            (None, Some(e)) => {
                                println!("{}  invalid  {}  ({e})", s.name, s.path.display())
                            }
                            (None, None) => unreachable!("summary without kind or error"),
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            };
        }
    };

    if let Some(workers) = args.workers {
        // worker count affects scheduling only, never results
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }

    let (mut scenario, text) = match config::load(&args.config) {
        Ok(loaded) => loaded,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let expected = runner::expect_kind(kind_name).expect("subcommand name");
    if scenario.kind != expected {
        eprintln!(
            "error: scenario {} has kind \"{}\" but was invoked as \"{}\"",
            scenario.name,
            scenario.kind.as_str(),
            kind_name
        );
        return ExitCode::from(2);
    }
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let out_dir = runner::resolve_out_dir(args.out.clone(), &scenario.name);
    let config_dir = args
        .config
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));

    match runner::run(&scenario, &text, &config_dir, &out_dir, args.quiet) {
        Ok(outcome) => ExitCode::from(outcome.exit.code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}
