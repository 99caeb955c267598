//! `minetlab`: train, predict, evaluate, gradient-check and ablate.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use minet_core::Error;

#[derive(Debug, Parser)]
#[command(name = "minetlab", version, about = "Salient object detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write log.csv plus checkpoints.
    Train(TrainArgs),
    /// Write one 8-bit saliency PNG per input image.
    Predict(PredictArgs),
    /// Score a prediction directory against ground-truth masks.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference loss gradients.
    Gradcheck(GradcheckArgs),
    /// Train each ablation row on one synthetic split and tabulate metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
struct DataSource {
    /// Directory holding `images/` and `masks/`.
    #[arg(long, group = "source")]
    data_dir: Option<PathBuf>,
    /// Two-column CSV of image and mask paths.
    #[arg(long, group = "source")]
    manifest: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading files.
    #[arg(long, group = "source")]
    synthetic: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: DataSource,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides `train.seed`; also seeds synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Optional validation set (`images/` and `masks/`) for best-checkpoint selection.
    #[arg(long)]
    validation_dir: Option<PathBuf>,
    /// Keep a checkpoint per epoch instead of only last and best.
    #[arg(long)]
    keep_epoch_checkpoints: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of input images.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// JSON report path; CSVs are written next to it.
    #[arg(long)]
    report: PathBuf,
    /// Run config whose `metrics` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Test hook: perturb the analytic gradient.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "baseline,+aim,+sim,+aim+sim,+aim+sim+cel")]
    rows: String,
    #[arg(long)]
    synthetic: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Comparison CSV.
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

/// Maps library errors onto the documented exit codes.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownBackbone(_) => 1,
        Error::NonFinite(_) | Error::PredictionRange(_) => 3,
        _ => 2,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("MINETLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("MINETLAB_THREADS must be a positive integer, got `{raw}`")))?;
    if n == 0 {
        return Err(Error::Config("MINETLAB_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
