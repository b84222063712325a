//! `voicelens` command-line pipeline.

mod commands;
mod data;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "voicelens", version, about = "Attribute-conditioned embedding flows: synthesize, fit, train, sample, edit, evaluate")]
struct Cli {
    /// Global random seed.
    #[arg(long, global = true, env = "VOICELENS_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus.
    Synth(SynthArgs),
    /// Fit a supporting or per-condition mixture model.
    FitGmm(FitGmmArgs),
    /// Train a flow on a corpus.
    Train(TrainArgs),
    /// Draw embeddings from a flow or mixture model.
    Sample(SampleArgs),
    /// Predict attributes of embeddings with a flow.
    Classify(ClassifyArgs),
    /// Edit one attribute of embeddings in base space.
    Edit(EditArgs),
    /// Distance statistics, clique curve, correlation and accuracy.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Named preset (`easy` or `hard`).
    #[arg(long, default_value = "hard", conflicts_with = "spec")]
    pub preset: String,
    /// Generator spec JSON; overrides the preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Fraction of categorical labels kept; the rest become ∅.
    #[arg(long, default_value_t = 1.0)]
    pub keep: f64,
    /// Fraction of continuous labels kept.
    #[arg(long, default_value_t = 1.0)]
    pub keep_continuous: f64,
    /// Output corpus directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GmmKind {
    Supporting,
    Conditional,
}

#[derive(Debug, Args, Serialize)]
pub struct FitGmmArgs {
    #[arg(long, value_enum, default_value = "supporting")]
    pub kind: GmmKind,
    /// Corpus directory; only its training split is used.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, short = 'k', default_value_t = 10)]
    pub components: usize,
    /// Condition attributes (comma separated); defaults to every categorical attribute.
    #[arg(long, value_delimiter = ',')]
    pub conditions: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Priors {
    Empirical,
    Uniform,
    Schema,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Corpus directory with a train/val split.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Supporting GMM JSON for regularization samples.
    #[arg(long)]
    pub gmm: PathBuf,
    /// Generator spec; when given, its oracle labels continuous attributes of regularization samples.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Regularization samples per batch.
    #[arg(long, default_value_t = 64)]
    pub reg_batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub layers: usize,
    /// Hidden widths, comma separated; default two layers of max(2d, 64).
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    /// Pseudo-label perturbation scale; default 0.05 × median nearest-neighbour distance.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, value_enum, default_value = "empirical")]
    pub priors: Priors,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Flow, conditional GMM or supporting GMM JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Conditions as `name=value,...`; `_` means ∅.
    #[arg(long, default_value = "")]
    pub label: String,
    /// Sweep a continuous attribute evenly over its range (flow only).
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(short = 'n', long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Embedding file or corpus directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Embedding file or corpus directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub attr: String,
    /// Add to a continuous attribute.
    #[arg(long, allow_hyphen_values = true, required_unless_present = "set", conflicts_with = "set")]
    pub delta: Option<f64>,
    /// New value or class.
    #[arg(long)]
    pub set: Option<String>,
    /// Row indices to edit (comma separated); default all.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Real embeddings: file or corpus directory.
    #[arg(long)]
    pub real: PathBuf,
    /// Generated embeddings: file or sample output directory.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Reconstructions aligned row by row with the real set.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    /// Restrict a real corpus to one split.
    #[arg(long)]
    pub split: Option<String>,
    /// Generator spec providing oracle measurements.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Flow whose classification accuracy on the real set is reported.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Emit the clique curve over bins of a continuous attribute.
    #[arg(long)]
    pub clique: bool,
    /// Bin width for the clique curve.
    #[arg(long, default_value_t = 10.0)]
    pub snr_bins: f64,
    #[arg(long, default_value = "snr")]
    pub snr_attr: String,
    /// Clique distance threshold; default the s2s statistic.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::FitGmm(a) => commands::fit_gmm(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Sample(a) => commands::sample(a, cli.seed),
        Command::Classify(a) => commands::classify(a, cli.seed),
        Command::Edit(a) => commands::edit(a, cli.seed),
        Command::Eval(a) => commands::eval(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voicelens: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
