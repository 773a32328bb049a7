use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use evdl_core::net::EvidenceActivation;

#[derive(Debug, Parser)]
#[command(name = "evdl", version, about = "Evidential binary classification with uncertainty-driven rejection")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Plain `key=value` file whose entries act as default flags for the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a two-Gaussian dataset with optional label noise.
    Synth(SynthArgs),
    /// Train a model (or an ensemble) on a CSV dataset.
    Train(TrainArgs),
    /// Write per-sample predictions and print whole-set metrics.
    Eval(EvalArgs),
    /// Metrics on the retained set across a grid of rejection rates.
    Reject(RejectArgs),
    /// Retrain after dropping the most uncertain training samples.
    Bootstrap(BootstrapArgs),
    /// Compare backprop against central finite differences on a random network.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Reject(_) => "reject",
            Command::Bootstrap(_) => "bootstrap",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn open_unit_interval(s: &str) -> Result<f64, String> {
    let v = unit_interval(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..))]
    pub n: u64,
    /// Bayes error of the clean problem, in [0, 0.5].
    #[arg(long, default_value_t = 0.15, value_parser = unit_interval)]
    pub overlap: f64,
    /// Symmetric label-flip probability.
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub noise: f64,
    /// Flip probability for positive labels; overrides --noise together with --noise-neg.
    #[arg(long, value_parser = unit_interval, requires = "noise_neg")]
    pub noise_pos: Option<f64>,
    /// Flip probability for negative labels.
    #[arg(long, value_parser = unit_interval, requires = "noise_pos")]
    pub noise_neg: Option<f64>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    pub dim: u64,
    #[arg(long, default_value_t = 0.5, value_parser = open_unit_interval)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training hyper-parameters shared by `train` and `bootstrap`.
#[derive(Debug, Args, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 3)]
    pub patience: u64,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub momentum: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = EvidenceActivation::Relu)]
    pub activation: EvidenceActivation,
    /// λ before, between and after the two decay points.
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "1,0.1,0.001")]
    pub lambda: Vec<f64>,
    /// Fractions of the epoch budget at which λ decays.
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "0.3333333333333333,0.6666666666666666")]
    pub lambda_points: Vec<f64>,
    /// Validation CSV; without it a seeded fraction of the data is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Held-out validation fraction when --val is absent; 0 disables early stopping.
    #[arg(long, default_value_t = 0.1, value_parser = unit_interval)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model file, or a directory when --ensemble is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of ensemble members.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub ensemble: Option<u64>,
    /// Training-subset fraction per ensemble member.
    #[arg(long, default_value_t = 0.8, value_parser = unit_interval, requires = "ensemble")]
    pub subset: f64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Clone)]
pub struct InferenceFlags {
    /// Model file or ensemble directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Average evidence over this many dropout passes instead of one eval pass.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub mc_passes: Option<u64>,
    /// Seed for the MC-dropout masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Predict positive iff p⁺ ≥ threshold.
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval, conflicts_with = "best_threshold")]
    pub threshold: f64,
    /// Use the cut maximizing the mean per-class F1 on this data instead.
    #[arg(long)]
    pub best_threshold: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Predictions CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub const DEFAULT_RATES: &str = "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5";

#[derive(Debug, Args)]
pub struct RejectArgs {
    #[command(flatten)]
    pub inference: InferenceFlags,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_RATES)]
    pub rates: Vec<f64>,
    /// Rejection curve CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    /// Training CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub threshold: f64,
    /// Report CSV; removed ids go to `<out>.removed.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    pub dim: u64,
    #[arg(long, value_delimiter = ',', default_value = "8,8")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(2..))]
    pub n: u64,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1.0, value_parser = unit_interval)]
    pub lambda: f64,
    #[arg(long, default_value_t = EvidenceActivation::Relu)]
    pub activation: EvidenceActivation,
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional one-line report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Splices `--config FILE` entries into `argv` right after the subcommand
/// name so that flags given on the command line come later and win. Returns
/// the rewritten arguments and the config path, which no longer appears in them.
pub fn expand_config(argv: Vec<OsString>) -> Result<(Vec<OsString>, Option<PathBuf>), String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--config" {
            config = Some(it.next().ok_or("--config needs a file")?);
        } else if let Some(path) = arg.to_str().and_then(|s| s.strip_prefix("--config=")) {
            config = Some(path.into());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config.map(PathBuf::from) else {
        return Ok((rest, None));
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut injected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        match value {
            "true" => injected.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                injected.push(format!("--{key}").into());
                injected.push(value.into());
            }
        }
    }
    // argv[0], then global flags, then the subcommand.
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 2)
        .unwrap_or(rest.len());
    rest.splice(sub..sub, injected);
    Ok((rest, Some(path)))
}
