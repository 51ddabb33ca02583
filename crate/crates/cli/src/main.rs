mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Tooth instance segmentation toolkit: geometric class prior, training
/// losses, deep-watershed post-processing, evaluation and synthetic phantoms.
#[derive(Parser, Debug)]
#[command(name = "toothseg", version)]
struct Cli {
    /// Worker threads; 0 uses every available core. Results do not depend on it.
    #[arg(long, global = true, env = "TOOTHSEG_THREADS", default_value_t = 0)]
    threads: usize,

    /// Diagnostics written to stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Off => log::LevelFilter::Off,
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Geometric class-penalty matrix.
    #[command(subcommand)]
    Geoprior(GeopriorCmd),
    /// Energy and direction supervision targets.
    #[command(subcommand)]
    Targets(TargetsCmd),
    /// Training losses on exported volumes.
    #[command(subcommand)]
    Loss(LossCmd),
    /// Instance post-processing.
    #[command(subcommand)]
    Watershed(WatershedCmd),
    /// Score a prediction against ground truth and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Synthetic dentitions with exact ground truth.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// End-to-end runs.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand, Debug)]
enum GeopriorCmd {
    /// Build the 33x33 penalty matrix from centroid tables.
    Build(BuildArgs),
}

#[derive(Subcommand, Debug)]
enum TargetsCmd {
    /// Per-instance EDT energy and unit descent directions from a label volume.
    Generate(TargetsArgs),
}

#[derive(Subcommand, Debug)]
enum LossCmd {
    /// Evaluate every loss term and the weighted total; prints JSON.
    Eval(LossArgs),
}

#[derive(Subcommand, Debug)]
enum WatershedCmd {
    /// Seed, flood and classify instances from an energy map and a segmentation.
    Run(WatershedArgs),
}

#[derive(Subcommand, Debug)]
enum PhantomCmd {
    /// Write phantom ground truth (and optionally corrupted predictions).
    Generate(PhantomArgs),
}

#[derive(Subcommand, Debug)]
enum PipelineCmd {
    /// Phantom, targets, corruption, watershed and evaluation in one go; prints the report.
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Male centroid CSV (quadrant,position,x,y). Bundled table when omitted.
    #[arg(long)]
    male: Option<PathBuf>,
    /// Female centroid CSV. Bundled table when omitted.
    #[arg(long)]
    female: Option<PathBuf>,
    /// Raw background penalty before the final normalization; must exceed 1.
    #[arg(long, default_value_t = 2.0, value_parser = parse_background_penalty)]
    background_penalty: f64,
    /// Output matrix; `.json` writes JSON, anything else CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TargetsArgs {
    /// Label volume (tooth classes, or instance ids with --instance-labels).
    #[arg(long)]
    labels: PathBuf,
    /// Treat label values as instance ids instead of tooth classes.
    #[arg(long)]
    instance_labels: bool,
    /// Output energy volume.
    #[arg(long)]
    out_energy: PathBuf,
    /// Output direction field.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// Predicted class probabilities (33-channel stack).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth class labels.
    #[arg(long)]
    gt: PathBuf,
    /// Penalty matrix CSV or JSON.
    #[arg(long)]
    matrix: PathBuf,
    /// Predicted energy; the EDT term is reported as null without it.
    #[arg(long)]
    pred_energy: Option<PathBuf>,
    /// Ground-truth energy; derived from --gt when omitted.
    #[arg(long)]
    gt_energy: Option<PathBuf>,
    /// Predicted unit directions; the direction term is reported as null without it.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Ground-truth directions; derived from --gt when omitted.
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    /// Average the direction loss over tooth voxels instead of summing.
    #[arg(long)]
    dir_mean: bool,
    #[arg(long, default_value_t = 10.0)]
    lambda_edt: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_seg: f64,
    #[arg(long, default_value_t = 1e-6)]
    lambda_dir: f64,
    /// Weight of GeoWDL inside the segmentation loss.
    #[arg(long, default_value_t = 1.0)]
    seg_geo_weight: f64,
    /// Weight of the cross-entropy inside the segmentation loss.
    #[arg(long, default_value_t = 1.0)]
    seg_wce_weight: f64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct WatershedFlags {
    /// Seed threshold as a fraction of each regional maximum, in (0, 1).
    #[arg(long, default_value_t = 0.5, value_parser = parse_beta)]
    beta: f64,
    /// Smallest seed kept.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    min_seed_voxels: u64,
    /// Smallest instance kept after flooding.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    min_instance_voxels: u64,
}

#[derive(Args, Debug)]
struct WatershedArgs {
    /// Predicted energy volume.
    #[arg(long)]
    energy: PathBuf,
    /// Segmentation: class labels or a 33-channel probability stack.
    #[arg(long)]
    seg: PathBuf,
    #[command(flatten)]
    flags: WatershedFlags,
    /// Output instance-id volume.
    #[arg(long)]
    out: PathBuf,
    /// Optional output of the per-voxel tooth classes.
    #[arg(long)]
    out_classes: Option<PathBuf>,
    /// Per-instance JSON report; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predicted class labels.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth class labels.
    #[arg(long)]
    gt: PathBuf,
    /// Predicted instance ids; one instance per class when omitted.
    #[arg(long, requires = "gt_inst")]
    pred_inst: Option<PathBuf>,
    /// Ground-truth instance ids.
    #[arg(long, requires = "pred_inst")]
    gt_inst: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    /// Gzipped NIfTI-1.
    NiiGz,
    /// Uncompressed NIfTI-1.
    Nii,
    /// Little-endian block plus JSON sidecar.
    Raw,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom spec JSON, or `default`.
    #[arg(long, default_value = "default")]
    spec: String,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    /// Corruption noise; overrides the phantom's noise_sigma. Predictions are written when positive.
    #[arg(long)]
    sigma: Option<f64>,
    /// Corruption seed; defaults to the phantom's jitter_seed.
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::NiiGz)]
    format: Format,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Phantom spec JSON, or `default`.
    #[arg(long, default_value = "default")]
    spec: String,
    /// Corruption noise; overrides the phantom's noise_sigma.
    #[arg(long)]
    sigma: Option<f64>,
    /// Corruption seed; defaults to the phantom's jitter_seed.
    #[arg(long)]
    noise_seed: Option<u64>,
    #[command(flatten)]
    flags: WatershedFlags,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_beta(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("beta must lie strictly between 0 and 1, got {v}"))
    }
}

fn parse_background_penalty(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 1.0 {
        Ok(v)
    } else {
        Err(format!("background penalty must be a finite number above 1, got {v}"))
    }
}

/// 2 for filesystem failures anywhere in the chain, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<toothseg::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
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
    env_logger::Builder::new().filter_level(cli.log_level.filter()).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
        return ExitCode::from(1);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
