//! `dcgmm`: train deep convolutional GMMs, sample from them, detect
//! outliers, in-paint and score clusterings.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(
    name = "dcgmm",
    version,
    about = "Deep convolutional Gaussian mixture models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on an IDX dataset and write a checkpoint.
    Train(TrainArgs),
    /// Draw unconditional samples.
    Sample(SampleArgs),
    /// Draw samples of one class through the classifier layer.
    CondSample(CondSampleArgs),
    /// Generate variants of template images.
    Variants(VariantsArgs),
    /// Complete corrupted images.
    Inpaint(InpaintArgs),
    /// ROC sweep of the outlier test on inlier and outlier data.
    Outliers(OutliersArgs),
    /// Dunn and Davies-Bouldin indices of the top-layer clustering.
    ClusterMetrics(ClusterArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Max,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    None,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Random seed.
    #[arg(long, env = "DCGMM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for batch evaluation; 1 is fully reproducible.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Dataset {
    /// IDX image file.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Keep only these classes, e.g. `0-4` or `1,3,7`; needs labels.
    #[arg(long)]
    pub classes: Option<String>,
    /// Use only the first N samples (after class filtering).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Architecture description file.
    #[arg(long)]
    pub arch: PathBuf,
    #[command(flatten)]
    pub data: Dataset,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// Per-sample learning rate of the GMM layers.
    #[arg(long, default_value_t = 0.011)]
    pub lr: f64,
    /// Upper bound on GMM precision entries.
    #[arg(long, default_value_t = 3.0)]
    pub p_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub classifier_lr: f64,
    #[arg(long, value_enum, default_value_t = LossArg::Max)]
    pub loss: LossArg,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct Generation {
    /// Checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Selection width when choosing components from a control signal.
    #[arg(long, default_value_t = 1)]
    pub top_s: usize,
    #[arg(long, default_value_t = 1000)]
    pub sharpen_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sharpen_step: f64,
    /// Draw from the selected components instead of emitting centroids.
    #[arg(long)]
    pub stochastic: bool,
    /// Grid columns; defaults to a near-square layout.
    #[arg(long)]
    pub columns: Option<usize>,
    /// PGM grid to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub gen: Generation,
    #[arg(long, default_value_t = 25)]
    pub count: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CondSampleArgs {
    #[command(flatten)]
    pub gen: Generation,
    /// Class to generate.
    #[arg(long)]
    pub label: usize,
    #[arg(long, default_value_t = 25)]
    pub count: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct VariantsArgs {
    #[command(flatten)]
    pub gen: Generation,
    #[command(flatten)]
    pub templates: Dataset,
    /// Layers from this one (counted from 1) upward keep the template's
    /// activities; 0 returns the templates.
    #[arg(long)]
    pub cutoff: usize,
    /// Variants per template; each template fills one grid row.
    #[arg(long, default_value_t = 5)]
    pub count: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub gen: Generation,
    #[command(flatten)]
    pub data: Dataset,
    /// Quadrant to blank before in-painting.
    #[arg(long, value_enum, default_value_t = Quadrant::None)]
    pub blank: Quadrant,
    /// Value written into the blanked quadrant.
    #[arg(long, default_value_t = 0.5)]
    pub fill: f64,
    /// Inlier cutoff: a position is an inlier if its log-likelihood is at
    /// least `mean - c * std`.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub c: f64,
    /// Also write the corrupted inputs as a PGM grid.
    #[arg(long)]
    pub corrupted_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct OutliersArgs {
    /// Checkpoint with outlier statistics.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// IDX images holding the inliers (and the outliers unless given separately).
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub outlier_images: Option<PathBuf>,
    #[arg(long)]
    pub outlier_labels: Option<PathBuf>,
    #[arg(long)]
    pub inlier_classes: Option<String>,
    #[arg(long)]
    pub outlier_classes: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// ROC CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: Dataset,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// CSV to write; the row is printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::CondSample(a) => commands::cond_sample(a),
        Command::Variants(a) => commands::variants(a),
        Command::Inpaint(a) => commands::inpaint(a),
        Command::Outliers(a) => commands::outliers(a),
        Command::ClusterMetrics(a) => commands::cluster_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dcgmm: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
