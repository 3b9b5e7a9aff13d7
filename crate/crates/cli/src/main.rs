use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oftta::commands::{cmd_adapt, cmd_bench, cmd_gen_data, cmd_train};
use oftta::data::SyntheticSpec;
use oftta::engine::TtaMethod;
use oftta::io::{DatasetConfig, Protocol, RunConfig};
use oftta::Result;

#[derive(Parser)]
#[command(name = "oftta", version, about = "Optimization-free test-time adaptation for activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train source checkpoints (one per held-out or source domain).
    Train(RunArgs),
    /// Run test-time adaptation and write per-batch records plus a summary.
    Adapt(RunArgs),
    /// Time each method per batch and estimate support-set memory.
    Bench(RunArgs),
    /// Write a synthetic corpus in the UCI-like directory layout.
    GenData(GenArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic`, `uci-har` (root from OFTTA_DATA_ROOT) or a dataset directory.
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated: erm, bn, t3a, oftta, alpha-bn:<ratio>.
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<String>>,
    /// looa, ctta or bs1.
    #[arg(long)]
    protocol: Option<String>,
    /// Comma-separated stream-shuffle seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// JSON synthetic-corpus settings (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve(args: RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.dataset {
        cfg.dataset = DatasetConfig::from_selector(&d);
    }
    if let Some(ms) = args.method {
        cfg.methods = ms.iter().map(|m| m.parse()).collect::<Result<Vec<TtaMethod>>>()?;
    }
    if let Some(p) = args.protocol {
        cfg.protocol = p.parse::<Protocol>()?;
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            for p in cmd_train(&resolve(a)?)? {
                println!("{}", p.display());
            }
        }
        Command::Adapt(a) => {
            cmd_adapt(&resolve(a)?)?;
        }
        Command::Bench(a) => {
            cmd_bench(&resolve(a)?)?;
        }
        Command::GenData(a) => {
            let mut spec = match &a.config {
                Some(path) => SyntheticSpec::load(path)?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            println!("{}", cmd_gen_data(&spec, &a.out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
