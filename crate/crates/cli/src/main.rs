//! `c2fcls`: train, evaluate and inspect the C2f binary image classifier.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "c2fcls", version, about = "Conv/C2f binary image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train on DATA_ROOT/train, validating on DATA_ROOT/valid each epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Embed a split with t-SNE and write CSV + SVG.
    Tsne(TsneArgs),
    /// Metric report from confusion counts or a predictions file.
    Report(ReportArgs),
    /// Write a synthetic two-class dataset tree.
    Synth(SynthArgs),
}

/// Every run-config key as an optional string override; values are parsed
/// and validated by the core config so errors name the field.
#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value configuration file; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "data_root", visible_alias = "data-root")]
    pub data_root: Option<String>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr0: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long = "weight_decay", visible_alias = "weight-decay")]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub beta1: Option<String>,
    #[arg(long)]
    pub beta2: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long = "batch_size", visible_alias = "batch-size")]
    pub batch_size: Option<String>,
    #[arg(long = "img_size", visible_alias = "img-size")]
    pub img_size: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long = "positive_class", visible_alias = "positive-class")]
    pub positive_class: Option<String>,
    #[arg(long = "output_dir", visible_alias = "output-dir")]
    pub output_dir: Option<String>,
    #[arg(long)]
    pub resume: Option<String>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    pub fn overrides(&self) -> Vec<(String, String)> {
        let fields = [
            ("data_root", &self.data_root),
            ("optimizer", &self.optimizer),
            ("lr0", &self.lr0),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("alpha", &self.alpha),
            ("eps", &self.eps),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("img_size", &self.img_size),
            ("seed", &self.seed),
            ("positive_class", &self.positive_class),
            ("output_dir", &self.output_dir),
            ("resume", &self.resume),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "data-root", visible_alias = "data_root")]
    pub data_root: PathBuf,
    /// train | test | valid
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long = "positive-class", visible_alias = "positive_class", default_value_t = 0)]
    pub positive_class: usize,
    #[arg(long = "batch-size", visible_alias = "batch_size", default_value_t = 16)]
    pub batch_size: usize,
    /// Directory for report.csv, confusion.txt and predictions.csv.
    #[arg(long = "output-dir", visible_alias = "output_dir", default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct TsneArgs {
    #[arg(long = "data-root", visible_alias = "data_root")]
    pub data_root: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Embedding dimension: 2 or 3.
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Images are resized to this square size before flattening.
    #[arg(long = "img-size", visible_alias = "img_size", default_value_t = 128)]
    pub img_size: usize,
    /// Embed pooled backbone features of this checkpoint instead of raw pixels.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "output-dir", visible_alias = "output_dir", default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Confusion counts as tp,fp,fn,tn.
    #[arg(long, conflicts_with = "predictions")]
    pub counts: Option<String>,
    /// predictions.csv written by `eval`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long = "positive-class", visible_alias = "positive_class", default_value_t = 0)]
    pub positive_class: usize,
    /// Label for the CSV row.
    #[arg(long, default_value = "unknown")]
    pub optimizer: String,
    /// Also write report.csv here.
    #[arg(long = "output-dir", visible_alias = "output_dir")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    /// Training images per class; valid and test get max(2, n/2) each.
    #[arg(long = "per-class", default_value_t = 8)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Tsne(a) => commands::tsne(a),
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
