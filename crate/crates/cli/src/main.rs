use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{ConfigError, RunConfig};

/// Joint estimation of templates, warps and correlated intensity variation
/// for stacks of grayscale images.
#[derive(Debug, Parser)]
#[command(name = "warpmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides output_dir)
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; defaults to the number of available cores
    #[arg(long)]
    threads: Option<usize>,
    /// Random seed (overrides seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model to a directory or list of PGM/PNG images
    Fit {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a dataset from the generative model
    Simulate {
        /// Template image (overrides template_path)
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare the model with Procrustes baselines on simulated data
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
    /// Predict warp and intensity for one image against a fitted template
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// params.txt written by fit
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Usage problems detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Input files that are missing, unreadable or malformed.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return EXIT_USAGE;
        }
        if cause.is::<InputError>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<warpmix::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_NUMERICAL };
        }
    }
    EXIT_NUMERICAL
}

fn settings(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.output {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Fit { common, .. }
        | Command::Simulate { common, .. }
        | Command::Benchmark { common }
        | Command::Predict { common, .. } => common,
    };
    let threads = match common.threads {
        Some(0) => return Err(UsageError("--threads must be at least 1".into()).into()),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let cfg = settings(common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?;
    pool.install(|| match &cli.command {
        Command::Fit { input, .. } => commands::fit(input, &cfg),
        Command::Simulate { input, .. } => commands::simulate(input.as_deref(), &cfg),
        Command::Benchmark { .. } => commands::benchmark(&cfg),
        Command::Predict {
            input,
            template,
            params,
            ..
        } => commands::predict(input, template, params, &cfg),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
