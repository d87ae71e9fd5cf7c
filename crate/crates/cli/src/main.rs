//! `decepkit`: gradient checks, training runs, ablations, report and manifest checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "decepkit", version, about = "Robust multimodal deception detection toolkit")]
pub struct Cli {
    /// Base seed for data, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file: flat `key = value` lines, or a JSON artifact with a "config" object.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for artifacts and the resolved config.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train one model on synthetic data.
    Train(TrainArgs),
    /// Train Base, +DMC, +SICS and Full over several seeds.
    Ablate(AblateArgs),
    /// Validate, filter or summarise a corpus of audit reports.
    Reports {
        #[command(subcommand)]
        action: ReportsAction,
    },
    /// Check a dataset manifest CSV.
    Manifest(ManifestArgs),
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    tol: Option<f64>,
    /// Feature width.
    #[arg(long)]
    d: Option<usize>,
    /// Sequence length.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    warm_steps: Option<usize>,
    /// Negate the gradient of parameters whose name contains this string.
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_a: Option<usize>,
    #[arg(long)]
    l_v: Option<usize>,
    #[arg(long)]
    l_a: Option<usize>,
    #[arg(long)]
    snr_v: Option<f64>,
    #[arg(long)]
    snr_a: Option<f64>,
    #[arg(long)]
    spike_frac: Option<f64>,
    #[arg(long)]
    spike_gain: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_sics: bool,
    #[arg(long)]
    no_dmc: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Number of consecutive seeds starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Auto,
    Plain,
    Jsonl,
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Auto)]
    format: Format,
}

#[derive(Subcommand, Debug)]
pub enum ReportsAction {
    /// Check every line against the report grammar.
    Validate {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Exit 1 when any line is malformed.
        #[arg(long)]
        strict: bool,
    },
    /// Drop malformed lines and near-duplicates.
    Filter {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        threshold: Option<f64>,
        /// Exit 1 when anything is dropped.
        #[arg(long)]
        strict: bool,
    },
    /// Length histogram and, for tagged records, audit category shares.
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = decepkit::schema::DEFAULT_BIN_WIDTH)]
        bin_width: usize,
    },
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    input: PathBuf,
    /// Required deceptive:truthful ratio per edition, e.g. 2:1.
    #[arg(long)]
    ratio: Option<decepkit::schema::Ratio>,
    /// Expected grand totals as total,deceptive,truthful.
    #[arg(long, value_parser = parse_totals)]
    expect_totals: Option<decepkit::schema::Totals>,
}

fn parse_totals(s: &str) -> Result<decepkit::schema::Totals, String> {
    let parts: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("{p:?} is not a count")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [t, d, u] => Ok((t, d, u)),
        _ => Err(format!("expected total,deceptive,truthful, found {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
