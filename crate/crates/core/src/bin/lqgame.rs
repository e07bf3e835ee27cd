use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lqgame::experiments::{self, ExperimentConfig, GameSource};
use lqgame::Error;

#[derive(Parser)]
#[command(name = "lqgame", version, about = "Policy optimization for zero-sum LQ games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati equation and report the equilibrium and margins.
    Oracle {
        /// `case1`, `case2` or a game JSON file; ignored when --config is given.
        #[arg(long, default_value = "case1")]
        game: String,
        /// Take the game from an experiment config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run the solvers of an experiment config and write their artifacts.
    Run(RunArgs),
    /// Like `run`, then print a side-by-side table of the solvers.
    Compare(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the sampled solvers (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn oracle(game: &str, config: Option<&Path>, json: bool) -> Result<ExitCode, Error> {
    let (source, base) = match config {
        Some(path) => (ExperimentConfig::load(path)?.game, config_base(path)),
        None => (GameSource::Builtin(game.to_owned()), PathBuf::from(".")),
    };
    let report = experiments::oracle(&source.load(&base)?)?;
    if json {
        print!("{}", report.to_json()?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(ExitCode::SUCCESS)
}

fn run(args: &RunArgs, table: bool) -> Result<ExitCode, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = std::env::current_dir()?.join(out);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let summary = experiments::run_experiment(&cfg, &config_base(&args.config))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else if table {
        print!("{}", experiments::comparison_table(&summary));
    } else {
        for r in &summary.solvers {
            let gap = r.summary.gap_to_oracle.map_or("-".to_owned(), |g| format!("{g:.3e}"));
            let status = if r.met_tolerance { "ok" } else { "FAILED" };
            println!("{:<24} {status:<7} iters {:>7}  gap {gap}", r.name, r.summary.iters);
            if let Some(e) = &r.error {
                println!("    {e}");
            }
        }
    }
    let failing = summary.failing();
    if failing.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("solvers that missed their tolerance: {}", failing.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Oracle { game, config, json } => oracle(game, config.as_deref(), *json),
        Command::Run(args) => run(args, false),
        Command::Compare(args) => run(args, true),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
