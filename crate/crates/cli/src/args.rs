use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use wpfs_core::embeddings::{
    EmbeddingMethod, Preprocessing, DEFAULT_EMBEDDING_SIZE, DEFAULT_NMF_ITERATIONS,
};
use wpfs_core::wpfs::{Method, DEFAULT_THRESHOLD};

/// λ grid used by `sweep` when `--lambdas` is absent.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 3e-6, 3e-5, 3e-4, 3e-3, 1e-2];

#[derive(Debug, Parser)]
#[command(
    name = "wpfs",
    version,
    about = "Weight predictor networks with feature selection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Repeated stratified cross-validation of one method.
    Cv(CvArgs),
    /// Cross-validation at each sparsity weight in a list.
    Sweep(SweepArgs),
    /// Per-feature embedding of a dataset.
    Embed(EmbedArgs),
    /// Synthetic dataset with known informative features.
    Synth(SynthArgs),
    /// Importance scores of a saved model.
    Importance(ImportanceArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Dataset CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,

    /// Name of the label column.
    #[arg(long, default_value = "label")]
    pub label_col: String,

    /// JSON run settings; keys are run-config field names, missing keys
    /// take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory. Nothing is written outside it.
    #[arg(long)]
    pub out: PathBuf,

    /// Overrides the config file.
    #[arg(long, value_parser = parse_with::<Method>)]
    pub method: Option<Method>,

    /// Overrides the config file. Without either, WPFS_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Runs trained at once.
    #[arg(long, default_value_t = default_jobs())]
    pub jobs: usize,

    /// Also write every trained model under `models/`.
    #[arg(long)]
    pub save_models: bool,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,

    /// Sparsity weight λ; overrides the config file.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,

    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS)]
    pub lambdas: Vec<f64>,

    /// Bins of the per-λ importance histograms over [0, 1].
    #[arg(long, default_value_t = 20)]
    pub score_bins: usize,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, default_value = "label")]
    pub label_col: String,

    #[arg(long, default_value = "nmf", value_parser = parse_with::<EmbeddingMethod>)]
    pub method: EmbeddingMethod,

    /// Embedding size M.
    #[arg(long, default_value_t = DEFAULT_EMBEDDING_SIZE)]
    pub k: usize,

    #[arg(long, default_value = "min_max", value_parser = parse_with::<Preprocessing>)]
    pub preprocessing: Preprocessing,

    /// Histogram bins for `dot_histogram`; defaults to `--k`.
    #[arg(long)]
    pub bins: Option<usize>,

    /// NMF multiplicative-update iterations.
    #[arg(long, default_value_t = DEFAULT_NMF_ITERATIONS)]
    pub iterations: usize,

    /// Without it, WPFS_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory; receives `embedding.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Only `default`: N=150, D=2000, 10 informative, 2 classes, σ=1.
    #[arg(long, default_value = "default")]
    pub preset: String,

    /// Without it, WPFS_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub samples: Option<usize>,

    #[arg(long)]
    pub features: Option<usize>,

    #[arg(long)]
    pub informative: Option<usize>,

    #[arg(long)]
    pub classes: Option<usize>,

    /// Noise standard deviation σ.
    #[arg(long)]
    pub noise: Option<f64>,

    #[arg(long, default_value = "label")]
    pub label_col: String,

    /// Output directory; receives `data.csv` and `informative.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    /// Model file written by `cv --save-models`.
    #[arg(long)]
    pub model: PathBuf,

    /// Features scoring above this are selected.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,

    /// Output directory; receives `importance.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_with<T: FromStr<Err = wpfs_core::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e| match e {
        wpfs_core::Error::Precondition(msg) => msg,
        other => other.to_string(),
    })
}
