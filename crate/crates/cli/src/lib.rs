//! Command-line front end for the portfolio research pipeline.
//!
//! Each subcommand runs one pipeline stage against an output directory;
//! stages are content-addressed, so rerunning with unchanged inputs is
//! a no-op. See `docs/formats.md` for the on-disk artifact formats.

// `!(x > 0.0)` rejects NaN along with the out-of-range values; the
// suggested `x <= 0.0` does not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod stages;
pub mod store;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::stages::StageContext;

#[derive(Parser)]
#[command(name = "cadport", version, about = "Cluster-and-hedge portfolio research pipeline")]
struct Cli {
    /// Pipeline configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides CADPORT_OUT and the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Recompute the stage even when its inputs are unchanged.
    #[arg(long, global = true)]
    stage_force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic market from [synth] stock specs.
    Synth,
    /// Parse, align, and normalize the market data.
    Ingest,
    /// Project per-stock feature summaries to two dimensions.
    Embed,
    /// Group the embedded stocks by density.
    Cluster,
    /// Train one trading agent per cluster.
    #[command(name = "train-a3c")]
    TrainA3c,
    /// Train the cross-cluster hedging agent.
    #[command(name = "train-ddpg")]
    TrainDdpg,
    /// Run the composed strategy over the test range.
    Backtest,
    /// Benchmark strategies side by side over the test range.
    Compare {
        /// Comma-separated roster, e.g. `cad,bah,crp`; defaults to the
        /// [compare] section.
        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        strategies: Option<Vec<String>>,
    },
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = config::PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| std::env::var_os("CADPORT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| cfg.out.clone());
    let ctx = StageContext { cfg: &cfg, out: &out, force: cli.stage_force };
    match cli.command {
        Command::Synth => stages::stage_synth(&ctx),
        Command::Ingest => stages::stage_ingest(&ctx),
        Command::Embed => stages::stage_embed(&ctx),
        Command::Cluster => stages::stage_cluster(&ctx),
        Command::TrainA3c => stages::stage_train_a3c(&ctx),
        Command::TrainDdpg => stages::stage_train_ddpg(&ctx),
        Command::Backtest => stages::stage_backtest(&ctx),
        Command::Compare { strategies } => stages::stage_compare(&ctx, strategies),
    }
}
