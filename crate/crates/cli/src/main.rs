//! `padforge`: corpus generation, training, evaluation, benchmarks and
//! gradient checks.

mod commands;
mod config;

use std::env;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use padforge::data::Protocol;
use padforge::gradcheck::CheckedLayer;
use padforge::model::ModelConfig;
use padforge::Error;

use commands::Subset;
use config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(
    name = "padforge",
    version,
    about = "Fingerprint presentation attack detection pipeline"
)]
struct Cli {
    /// Worker threads for data generation, loading and augmentation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Overrides the config seed and the PADFORGE_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: images plus manifest.tsv.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the split selected by the config; writes a checkpoint and log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest file or corpus directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a split and write scores, metrics and DET curve.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the protocol of the config's split. Cross-sensor without
        /// configured test sensors tests on every other sensor in the data.
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and measured cost of standard and separable convolution.
    BenchConv {
        /// Comma-separated DkxXxYxDy shapes.
        #[arg(long, default_value = commands::DEFAULT_BENCH_SHAPES)]
        shapes: String,
        #[arg(long, default_value = "bench_conv.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Time single-image inference (full-size network unless a config is given).
    BenchLatency {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and the end-to-end loss.
    Gradcheck {
        /// Model for the end-to-end check comes from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true, value_parser = parse_layer)]
        inject_fault: Option<CheckedLayer>,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_layer(s: &str) -> Result<CheckedLayer, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Invalid(_) | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> padforge::Result<RunConfig> {
    let mut cfg = RunConfig::load(path.map(PathBuf::as_path))?;
    cfg.resolve_seed(seed, env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

fn run(cli: Cli) -> padforge::Result<bool> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_ref(), cli.seed)?;
            let out = commands::default_out(&cfg, out, "corpus");
            commands::gen_data(&cfg, &out, workers)?;
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_ref(), cli.seed)?;
            let out = commands::default_out(&cfg, out, "run");
            commands::train(&cfg, &data, &out, workers)?;
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            protocol,
            subset,
            out,
        } => {
            let cfg = load_config(config.as_ref(), cli.seed)?;
            let out = commands::default_out(&cfg, out, "eval");
            commands::eval(&cfg, &checkpoint, &data, protocol, subset, &out, workers)?;
        }
        Command::BenchConv { shapes, out, repeats } => {
            let seed = load_config(None, cli.seed)?.seed;
            commands::bench_conv(&commands::parse_shapes(&shapes)?, &out, repeats, seed)?;
        }
        Command::BenchLatency { config, repeats, out } => {
            let model = match &config {
                Some(_) => load_config(config.as_ref(), cli.seed)?.model,
                None => ModelConfig::default(),
            };
            let seed = load_config(config.as_ref(), cli.seed)?.seed;
            commands::bench_latency(&model, repeats, out.as_deref(), seed)?;
        }
        Command::Gradcheck {
            config,
            tolerance,
            inject_fault,
        } => {
            let cfg = load_config(config.as_ref(), cli.seed)?;
            let model = config.as_ref().map(|_| cfg.model.clone());
            return commands::gradcheck(model, tolerance, cfg.seed, inject_fault);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
