//! `agbmap` command-line front end. Each subcommand wraps one library
//! operation; `run` executes the whole pipeline from a JSON config.
//!
//! Exit codes: 0 success, 1 validation failure (bad arguments, config or
//! inputs), 2 failure while a stage was running.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use agbmap_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "agbmap", version, about = "Aboveground-biomass mapping from lidar footprints and satellite rasters")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log level for the JSON log lines written to stderr.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: tracing::Level,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Screen footprints on quality flags.
    FilterQuality(FilterQualityArgs),
    /// Fit a backscatter-vs-height curve from (rh, gamma_db) pairs.
    FitSarCurve(FitSarCurveArgs),
    /// Drop footprints outside the tolerance band of SAR curves.
    FilterSar(FilterSarArgs),
    /// Fit the RH→AGB model from field plots matched to footprints.
    FitAllometry(FitAllometryArgs),
    /// Convert footprint RH to AGB labels, attaching stack features.
    Label(LabelArgs),
    /// Build the 25-layer feature stack from raw rasters.
    BuildStack(BuildStackArgs),
    /// Build the forest mask from cover, loss-year and gain rasters.
    BuildMask(BuildMaskArgs),
    /// Train one model on labeled samples.
    Train(TrainArgs),
    /// K-fold training with fold maps and ensemble mean/std.
    CvRun(CvRunArgs),
    /// Predict an AGB map with a trained model.
    Predict(PredictArgs),
    /// Combine fold maps into mean and standard-deviation maps.
    Ensemble(EnsembleArgs),
    /// Validate a map against field plots.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline from a JSON config.
    Run(RunArgs),
    /// Write a seeded synthetic world with a ready-to-run config.
    SynthWorld(SynthWorldArgs),
}

#[derive(Args, Debug)]
pub struct FilterQualityArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// QualityCriteria JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Column map JSON for non-default footprint headers.
    #[arg(long)]
    pub columns: Option<PathBuf>,
    #[arg(long)]
    pub min_sensitivity: Option<f64>,
    #[arg(long)]
    pub allow_day: bool,
    #[arg(long)]
    pub allow_coverage_beams: bool,
    #[arg(long)]
    pub allow_degraded: bool,
}

#[derive(Args, Debug)]
pub struct FitSarCurveArgs {
    /// CSV with `rh` and `gamma_db` columns.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value = "saturating-exp")]
    pub form: String,
    #[arg(long, default_value = "HV")]
    pub polarization: String,
    #[arg(long, default_value_t = agbmap_core::sar::DEFAULT_TOLERANCE_DB)]
    pub tol_db: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FilterSarArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated curve JSON files.
    #[arg(long, value_delimiter = ',', required = true)]
    pub curves: Vec<PathBuf>,
    /// Overrides the tolerance stored in each curve.
    #[arg(long)]
    pub tol_db: Option<f64>,
    #[arg(long, default_value_t = 98)]
    pub rh: u8,
    /// Stack to sample backscatter from when the table has no gamma columns.
    #[arg(long)]
    pub stack: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rejects: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitAllometryArgs {
    #[arg(long)]
    pub plots: PathBuf,
    #[arg(long)]
    pub trees: PathBuf,
    /// Footprints to match plots against.
    #[arg(long)]
    pub footprints: PathBuf,
    #[arg(long, default_value = "power")]
    pub form: String,
    /// Use this RH percentile instead of selecting by correlation.
    #[arg(long)]
    pub percentile: Option<u8>,
    #[arg(long, default_value_t = 30.0)]
    pub match_distance_m: f64,
    #[arg(long, default_value_t = agbmap_core::calibration::DEFAULT_MIN_DBH_CM)]
    pub min_dbh_cm: f64,
    #[arg(long, default_value = "region")]
    pub region: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional report with the percentile table and plot matches.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    #[arg(long)]
    pub footprints: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stack: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildStackArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildMaskArgs {
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long)]
    pub loss: PathBuf,
    #[arg(long)]
    pub gain: PathBuf,
    #[arg(long, default_value_t = agbmap_core::stack::DEFAULT_COVER_THRESHOLD_PCT)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LearnerArgs {
    /// `rf` / `random_forest` or `gbdt` / `lightgbm`.
    #[arg(long)]
    pub learner: String,
    /// TrainConfig JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    #[command(flatten)]
    pub learner: LearnerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CvRunArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub stack: PathBuf,
    #[command(flatten)]
    pub learner: LearnerArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Fold-assignment seed.
    #[arg(long, default_value_t = 42)]
    pub fold_seed: u64,
    /// Also report a train/test split with this train share.
    #[arg(long)]
    pub holdout_ratio: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub holdout_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub chunk_rows: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub chunk_rows: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Comma-separated fold maps.
    #[arg(long, value_delimiter = ',', required = true)]
    pub maps: Vec<PathBuf>,
    #[arg(long)]
    pub out_mean: PathBuf,
    #[arg(long)]
    pub out_std: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub plots: PathBuf,
    #[arg(long)]
    pub trees: PathBuf,
    #[arg(long, default_value_t = agbmap_core::calibration::DEFAULT_MIN_DBH_CM)]
    pub min_dbh_cm: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Paired (observed, predicted) table; defaults next to the report.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub fold_seed: Option<u64>,
    /// Comma-separated learners to run.
    #[arg(long, value_delimiter = ',')]
    pub learners: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct SynthWorldArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// WorldSpec JSON; missing keys take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// 64x64 world with 500 shots and 10 plots.
    #[arg(long)]
    pub tiny: bool,
}

/// 1 for problems detectable before work starts, 2 for failures during it.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { .. } | Error::InsufficientData(_) | Error::OutsideExtent { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .json()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            tracing::error!(error = %e, "could not configure thread pool");
            return ExitCode::from(1);
        }
    }
    match commands::dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            tracing::error!(error = %e, exit_code = code, "command failed");
            ExitCode::from(code)
        }
    }
}
