mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bednet", version, about = "Spatial bed-net allocation: simulate, fit, optimize, recommend, study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic panels.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// `correct` or `quadratic_misspec`.
        #[arg(long, default_value = "correct")]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
    },
    /// Fit the dynamics model by Gibbs sampling.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Search allocation-policy weights against posterior rollouts.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Posterior CSV; overrides `data.posterior`.
        #[arg(long)]
        posterior: Option<PathBuf>,
        /// Also optimize separately against this many thinned posterior draws.
        #[arg(long)]
        per_draw: Option<usize>,
    },
    /// Allocate next year's coverage.
    Recommend {
        #[command(flatten)]
        common: Common,
        /// Policy JSON path, or `highest_rate` / `even`.
        #[arg(long)]
        policy: Option<String>,
        /// Observation year the risk factors come from; the latest by default.
        #[arg(long)]
        year: Option<i64>,
    },
    /// Run the simulation study.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        scenario: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common, scenario, replicates } => commands::simulate(&common, &scenario, replicates),
        Command::Fit { common } => commands::fit(&common),
        Command::Optimize { common, posterior, per_draw } => commands::optimize(&common, posterior, per_draw),
        Command::Recommend { common, policy, year } => commands::recommend(&common, policy, year),
        Command::Study { common, replicates, scenario } => commands::study(&common, replicates, scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
