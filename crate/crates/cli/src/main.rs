//! `acdg`: generate data, train, denoise, evaluate and plot.

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use acdg::baselines::DenoiserSpec;
use acdg::{CheckpointError, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: String) -> Self {
        Self { code: 2, msg }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::Checkpoint(CheckpointError::Missing(_)) => 3,
            Error::Checkpoint(CheckpointError::CorruptManifest(_) | CheckpointError::Truncated { .. }) => 4,
            Error::Checkpoint(CheckpointError::ShapeMismatch { .. }) | Error::Dimension(_) => 5,
            Error::Schema { .. } => 6,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  other failure (i/o, training)
  2  invalid flags or configuration
  3  checkpoint missing
  4  checkpoint corrupt
  5  axis or shape mismatch between data and model
  6  malformed input file";

#[derive(Parser)]
#[command(name = "acdg", version, about = "Joint spectral denoising and cross-domain classification", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-condition dataset.
    GenData {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one source condition and write a checkpoint.
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Dataset directory (or CSV with `axis.json` beside it).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Acdg)]
        method: Method,
    },
    /// Denoise every row of a dataset with a trained checkpoint.
    Denoise {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its task, or run the full protocol when no
    /// checkpoint is given.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG plots and their CSV tables from eval outputs.
    Report {
        /// Eval output directories; repeatable.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Acdg,
    Erm,
}

/// Config layers on top of the defaults: `--config` first, then flags.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration; partial files are merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One seed, or a comma list for the protocol.
    #[arg(long, value_parser = parse_list::<u64>)]
    seed: Option<List<u64>>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    strains: Option<u64>,
    /// Acquisition times in seconds, comma separated.
    #[arg(long, value_parser = parse_positive_list)]
    conditions: Option<List<f64>>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    per_cell: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(8..))]
    axis_length: Option<u64>,
    /// 0 writes the initialised model without training.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    batch_size: Option<u64>,
    #[arg(long, value_parser = parse_positive)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_non_negative)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_non_negative)]
    beta: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    tau: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    generators: Option<u64>,
    /// Source acquisition time(s); `all` for every condition.
    #[arg(long, value_parser = parse_sources)]
    source_condition: Option<List<f64>>,
    /// Fraction(s) of the source condition used for training.
    #[arg(long, value_parser = parse_fractions)]
    train_fraction: Option<List<f64>>,
    /// Classical denoiser `kind:key=val,...`; repeatable, `none` for no baselines.
    #[arg(long, value_parser = parse_denoiser)]
    denoiser: Vec<DenoiserArg>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserArg(Option<DenoiserSpec>);

fn parse_list<T: FromStr>(s: &str) -> Result<List<T>, String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("'{p}' is not a valid number")))
        .collect::<Result<Vec<T>, String>>()?;
    Ok(List(v))
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("'{s}' must be a positive number")),
    }
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("'{s}' must be a non-negative number")),
    }
}

fn parse_positive_list(s: &str) -> Result<List<f64>, String> {
    let l = parse_list::<f64>(s)?;
    if l.0.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err("every value must be positive".into());
    }
    Ok(l)
}

fn parse_sources(s: &str) -> Result<List<f64>, String> {
    if s == "all" {
        return Ok(List(Vec::new()));
    }
    parse_positive_list(s)
}

fn parse_fractions(s: &str) -> Result<List<f64>, String> {
    let l = parse_list::<f64>(s)?;
    if l.0.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err("fractions must lie strictly between 0 and 1".into());
    }
    Ok(l)
}

fn parse_denoiser(s: &str) -> Result<DenoiserArg, String> {
    if s == "none" {
        return Ok(DenoiserArg(None));
    }
    s.parse::<DenoiserSpec>().map(|d| DenoiserArg(Some(d))).map_err(|e| e.to_string())
}

impl Overrides {
    /// Applies `--config` and then the flags on top of `base`.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => base.with_file(p)?,
            None => base,
        };
        if let Some(List(s)) = &self.seed {
            if s.is_empty() {
                return Err(Failure::usage("--seed: empty list".into()));
            }
            c.seed = s[0];
            c.protocol.seeds = s.clone();
        }
        if let Some(v) = self.strains {
            c.data.strains = v as usize;
        }
        if let Some(List(v)) = &self.conditions {
            c.data.conditions = v.clone();
        }
        if let Some(v) = self.per_cell {
            c.data.per_cell = v as usize;
        }
        if let Some(v) = self.axis_length {
            c.data.axis_length = v as usize;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v as usize;
        }
        if let Some(v) = self.lr {
            c.train.optimizer.lr = v;
        }
        if let Some(v) = self.alpha {
            c.train.weights.alpha = v;
        }
        if let Some(v) = self.beta {
            c.train.weights.beta = v;
        }
        if let Some(v) = self.tau {
            c.train.weights.tau = v;
        }
        if let Some(v) = self.generators {
            c.train.model.generators = v as usize;
        }
        if let Some(List(v)) = &self.source_condition {
            c.protocol.source_conditions = v.clone();
        }
        if let Some(List(v)) = &self.train_fraction {
            c.protocol.train_fractions = v.clone();
        }
        if !self.denoiser.is_empty() {
            c.denoisers = self.denoiser.iter().filter_map(|d| d.0).collect();
        }
        c.train.seed = c.seed;
        c.train.model.length = c.data.axis_length;
        c.train.model.classes = c.data.strains;
        c.validate()?;
        Ok(c)
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ACDG_THREADS") else {
        return Ok(());
    };
    let n = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("ACDG_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("ACDG_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    commands::start_clock();
    init_threads()?;
    match cli.command {
        Command::GenData { o, out } => commands::gen_data(&o, &out),
        Command::Train { o, data, out, method } => commands::train(&o, &data, &out, method),
        Command::Denoise { o, data, checkpoint, out } => commands::denoise(&o, &data, &checkpoint, &out),
        Command::Eval { o, data, checkpoint, out } => match checkpoint {
            Some(ck) => commands::eval_checkpoint(&o, &data, &ck, &out),
            None => commands::eval_protocol(&o, &data, &out),
        },
        Command::Report { data, out } => commands::report(&data, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
