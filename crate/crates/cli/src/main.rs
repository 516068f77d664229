//! `intseg`: data generation, training, evaluation, benchmarks and the
//! session server behind one binary.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "intseg", version, about = "Click-driven interactive segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Master seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with [train], [model], [zoom], [eval], [scene] and [service] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every report and artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Config override as section.key=value; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run single-threaded so wall-clock dependent scheduling cannot leak into results.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// Where samples come from: a generated dataset on disk or scenes drawn from `--seed`.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training scenes to generate when no --data is given.
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    /// Evaluation scenes to generate when no --data is given.
    #[arg(long, default_value_t = 50)]
    pub n_eval: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/eval dataset with a manifest.
    GenData {
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_eval: usize,
    },
    /// Train the coarse network, then the fine network.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Skip the fine stage.
        #[arg(long)]
        coarse_only: bool,
    },
    /// Robot-user evaluation: NoC, NoF, mIoU per click and click histogram.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file, or a directory with coarse.ckpt and fine.ckpt.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// components, fpm or strategy.
        #[arg(long, default_value = "components")]
        grid: String,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Time sparse click propagation against the dense non-local oracle.
    BenchGraph {
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        clicks: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Seconds per click of a trained pipeline.
    BenchSpc {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient checks of the differentiable ops.
    Gradcheck {
        /// Comma-separated op names, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        ops: Vec<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Run the HTTP session service.
    Serve {
        /// Checkpoint file or directory; an untrained model seeded by --seed otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        /// Idle seconds before a session is dropped.
        #[arg(long)]
        session_ttl: Option<u64>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// UI bundle served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .init();
    match commands::run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
