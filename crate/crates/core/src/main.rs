use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use votacast::config::RunConfig;
use votacast::pipeline::{run_stage, Stage};

#[derive(Parser)]
#[command(name = "votacast", version, about = "Election forecasts from a survey model and a poll-error model")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,

    /// Base seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Continue past convergence and ESS failures.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the survey model and write its posterior draws.
    FitFundamental,
    /// Fit the poll-error model on past elections.
    FitPolls,
    /// Simulate province results and weight them by the target polls.
    Synthesize,
    /// Seat distribution of the synthesized ensemble.
    Allocate {
        /// Allocate the published results of the target election instead.
        #[arg(long)]
        official: bool,
    },
    /// Fit the regression benchmarks on the history table.
    Benchmark,
    /// Comparison tables, vote and seat summaries and the manifest.
    Report,
    /// Write a synthetic survey, census and polls archive to the input paths.
    Synth,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = match cli.command {
        Command::FitFundamental => Stage::FitFundamental,
        Command::FitPolls => Stage::FitPolls,
        Command::Synthesize => Stage::Synthesize,
        Command::Allocate { official } => Stage::Allocate { official },
        Command::Benchmark => Stage::Benchmark,
        Command::Report => Stage::Report,
        Command::Synth => Stage::Synth,
    };
    let config = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let mut config = match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    };
    if let Some(out) = cli.out {
        config.out_dir = std::path::absolute(&out).unwrap_or(out);
    }
    config.force |= cli.force;
    match run_stage(&config, stage) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
