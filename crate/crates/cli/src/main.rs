mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{MissingFile, Run};
use config::{ConfigError, ExperimentConfig, VariantSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING_FILE: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "ropelab", version, about = "Rotary embedding experiments at desk scale")]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "ROPELAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print per-pair frequencies and rotation angles of a variant.
    RopeDump(RopeDumpArgs),
    /// Train a model; writes model.tmdl and loss.csv.
    Train,
    /// Needle-in-a-haystack grid per variant.
    Needle,
    /// Perplexity curve per variant.
    Ppl,
    /// Attention entropy, distance profiles and JS divergences.
    Analyze,
    /// Grids, curves and a summary for every variant.
    Compare,
}

#[derive(clap::Args, Debug)]
struct RopeDumpArgs {
    /// `rope`, `pi:A`, `ntk:B`, `ntk-scale:S`, `yarn:A` or `yarn:A:LOW:HIGH:T`.
    #[arg(long, default_value = "rope")]
    variant: VariantSpec,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    #[arg(long, default_value_t = 10_000.0)]
    base: f64,
    /// Original context length anchoring the default YaRN ramp.
    #[arg(long, default_value_t = 2048)]
    original_context: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    positions: Vec<usize>,
    /// Pair indices; all pairs when omitted.
    #[arg(long, value_delimiter = ',')]
    pairs: Option<Vec<usize>>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("--config is required for this command".into()))?;
    if !path.is_file() {
        return Err(MissingFile(path.clone()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn rope_dump(cli: &Cli, args: &RopeDumpArgs) -> Result<()> {
    let variant = commands::rope_dump_variant(&args.variant, args.head_dim, args.base, args.original_context)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let pairs = args
        .pairs
        .clone()
        .unwrap_or_else(|| (0..args.head_dim / 2).collect());
    let table = commands::rope_dump(&variant, &args.positions, &pairs)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    match &cli.out {
        Some(out) => {
            let hash = artifacts::sha256_hex(format!("{variant} {args:?}").as_bytes());
            for p in commands::rope_dump_artifact(out, &table, hash)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
        None => commands::write_stdout(&table),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::RopeDump(args) = &cli.command {
        return rope_dump(cli, args);
    }
    let cfg = load_config(cli)?;
    let run = Run::prepare(cfg, cli.out.clone())?;
    let written = match cli.command {
        Command::Train => run.train_cmd()?,
        Command::Needle => run.needle_cmd()?,
        Command::Ppl => run.ppl_cmd()?,
        Command::Analyze => run.analyze_cmd()?,
        Command::Compare => run.compare_cmd()?,
        Command::RopeDump(_) => unreachable!(),
    };
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<MissingFile>() {
            return EXIT_MISSING_FILE;
        }
        if let Some(e) = cause.downcast_ref::<ropelab::Error>() {
            use ropelab::Error as E;
            return match e {
                E::Config(_) | E::Validation(_) | E::InvalidVariant(_) | E::TooShort(_) | E::CapExceeded { .. } => {
                    EXIT_CONFIG
                }
                E::Numeric(_) | E::TrainingDiverged { .. } => EXIT_NUMERIC,
                E::Format(_) => EXIT_IO,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound {
                EXIT_MISSING_FILE
            } else {
                EXIT_IO
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
