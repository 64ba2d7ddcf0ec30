//! `distildoc`: train and evaluate toy distillation runs, verify loss
//! gradients, score predictions, and build layout-aware document prompts.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "distildoc",
    version,
    about = "Knowledge-distillation toolkit: toy training runs, gradient checks, calibration metrics, ANLS scoring, and layout-enriched prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy teacher/student pair and report metrics for the
    /// teacher, a CE-only student, and the distilled student.
    Distill(DistillArgs),
    /// Compare analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Insert layout tags from detections into an OCR token stream.
    Enrich(EnrichArgs),
    /// Serialize a document as plain or structure-preserving text.
    Serialize(SerializeArgs),
    /// Render the question prompt around a serialized document.
    Prompt(PromptArgs),
    /// Compute accuracy/ECE/AURC over a prediction record file.
    Metrics(MetricsArgs),
    /// Score predictions against gold answers with ANLS.
    Anls(AnlsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ce,
    Vanilla,
    Nkd,
    Mse,
    Fitnet,
    Simkd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProjectorArg {
    Identity,
    LinearCls,
    ConvReshape,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Vanilla,
    Mse,
    Nkd,
    Fitnet,
    Simkd,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Plain,
    Space,
}

#[derive(Args)]
pub struct DistillArgs {
    /// Training objective for the distilled student.
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// CE/KD trade-off for vanilla KD.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Softmax temperature.
    #[arg(long, default_value_t = 2.5)]
    pub tau: f64,
    /// Non-target weight for NKD.
    #[arg(long, default_value_t = 1.5)]
    pub gamma: f64,
    /// Projector for the feature-based methods.
    #[arg(long, value_enum, default_value_t = ProjectorArg::LinearCls)]
    pub projector: ProjectorArg,
    /// Root seed; all run randomness derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// SGD epochs for each training run.
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// Output directory for weights, traces, and reports.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Which loss to check.
    #[arg(long, value_enum, default_value_t = LossArg::All)]
    pub loss: LossArg,
    /// Random instances per loss.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Seed for instance generation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EnrichArgs {
    /// OCR document (JSON, schema v1).
    #[arg(long)]
    pub ocr: std::path::PathBuf,
    /// Layout detections (JSON, schema v1).
    #[arg(long)]
    pub dla: std::path::PathBuf,
    /// Minimum IoU for a token box to qualify for a region.
    #[arg(long, default_value_t = 0.3)]
    pub iou_threshold: f64,
    /// Region classes skipped during enrichment (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "Text")]
    pub ignore_labels: Vec<String>,
    /// Output path for the enriched token JSON.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args)]
pub struct SerializeArgs {
    /// OCR document (JSON, schema v1).
    #[arg(long)]
    pub ocr: std::path::PathBuf,
    /// Serialization layout.
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Optional enriched token stream to serialize instead of the raw
    /// tokens; must strip back to the OCR document.
    #[arg(long)]
    pub enriched: Option<std::path::PathBuf>,
    /// Output text file.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args)]
pub struct PromptArgs {
    /// Serialized document text.
    #[arg(long)]
    pub doc_text: std::path::PathBuf,
    /// The question to ask.
    #[arg(long)]
    pub question: String,
    /// Output file for the rendered prompt.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Prediction records (JSON, schema v1).
    #[arg(long)]
    pub records: std::path::PathBuf,
    /// Calibration bin count.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Args)]
pub struct AnlsArgs {
    /// Predictions file (JSON, schema v1).
    #[arg(long)]
    pub pred: std::path::PathBuf,
    /// Gold answers file (JSON, schema v1).
    #[arg(long)]
    pub gold: std::path::PathBuf,
    /// Similarity acceptance threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("DISTILDOC_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Distill(args) => commands::distill(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
        Command::Enrich(args) => commands::enrich(&args),
        Command::Serialize(args) => commands::serialize(&args),
        Command::Prompt(args) => commands::prompt(&args),
        Command::Metrics(args) => commands::metrics(&args),
        Command::Anls(args) => commands::anls(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
