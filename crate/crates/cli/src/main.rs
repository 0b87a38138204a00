use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use farelab::pipeline::{run_from_path, Stage};
use log::error;

/// Run the routing-fairness pipeline from a TOML config.
#[derive(Parser, Debug)]
#[command(name = "farelab", version, about)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Run directory; overrides `output.dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,

    /// generate, extract, profile, select, intervene, evaluate, ablate, mask, report or all.
    #[arg(long, default_value = "all", value_parser = parse_stage)]
    stage: Stage,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: farelab::FareError| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run_from_path(&cli.config, cli.out_dir.as_deref(), cli.seed, cli.stage) {
        Ok(records) => {
            for r in records {
                println!("{}\t{} ms\t{} artifacts", r.stage, r.elapsed_ms, r.artifacts.len());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
