//! `chartloc`: synthetic CSI datasets, channel-chart training, fingerprint
//! indexing, GAT localizer training, evaluation, and retrieval benchmarks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure. `CHARTLOC_THREADS` caps internal parallelism (the bench command
//! defaults to a single thread for stable timings).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;

#[derive(Parser)]
#[command(name = "chartloc", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; artifacts use fixed names inside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic CSI dataset (dataset.csids).
    Generate(CommonArgs),
    /// Train the configured chart encoder on the full dataset.
    TrainChart(CommonArgs),
    /// Embed the labeled split and write embeddings.csv + index.json.
    BuildIndex(CommonArgs),
    /// Train the GAT localizer on the labeled split (chart frozen).
    TrainLoc(CommonArgs),
    /// Evaluate localizer and WKNN baseline on the test split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write per_sample.csv with per-query errors.
        #[arg(long)]
        per_sample: bool,
    },
    /// Time latent vs brute-force ADP retrieval and WKNN (bench.json).
    Bench(CommonArgs),
}

fn init_threads(default_single: bool) {
    let configured = std::env::var("CHARTLOC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let threads = match (configured, default_single) {
        (Some(n), _) => Some(n.max(1)),
        (None, true) => Some(1),
        (None, false) => None,
    };
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> chartloc_core::Result<()> {
    match &cli.cmd {
        Cmd::Generate(a) => commands::cmd_generate(&Ctx::new(&a.config, a.seed, &a.out)?),
        Cmd::TrainChart(a) => commands::cmd_train_chart(&Ctx::new(&a.config, a.seed, &a.out)?),
        Cmd::BuildIndex(a) => commands::cmd_build_index(&Ctx::new(&a.config, a.seed, &a.out)?),
        Cmd::TrainLoc(a) => commands::cmd_train_loc(&Ctx::new(&a.config, a.seed, &a.out)?),
        Cmd::Evaluate { common, per_sample } => {
            commands::cmd_evaluate(&Ctx::new(&common.config, common.seed, &common.out)?, *per_sample)
        }
        Cmd::Bench(a) => commands::cmd_bench(&Ctx::new(&a.config, a.seed, &a.out)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads(matches!(cli.cmd, Cmd::Bench(_)));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
