mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Meta-trained in-context operator regression.
#[derive(Parser, Debug)]
#[command(name = "tdx", version, about)]
pub struct Cli {
    /// Seed used by every command that does not get its own.
    #[arg(long, global = true, env = "TDX_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an ADR meta-dataset.
    Generate(GenerateArgs),
    /// Meta-train a model on a generated meta-dataset.
    Train(TrainArgs),
    /// Regress held-out operators with the model and the baselines.
    Evaluate(EvaluateArgs),
    /// Evaluate on operators generated with other length scales and times.
    Extrapolate(ExtrapolateArgs),
    /// Flag elements of a dataset that the model regresses poorly.
    Outliers(OutliersArgs),
    /// Finite-dimensional classification of IDX images.
    Classify(ClassifyArgs),
    /// Print the header of a container or IDX file.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    MetaTrain,
    MetaTest,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// JSON file with generation settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_datasets: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub t: Option<f64>,
    /// Correlation length of the initial states.
    #[arg(long)]
    pub l: Option<f64>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Full-scale defaults (500 operators with 100 pairs).
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub meta: PathBuf,
    /// Checkpoint path; also the resume source with --resume.
    #[arg(long)]
    pub out: PathBuf,
    /// Training curve CSV (defaults to the checkpoint path with .csv).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// JSON file with `model` and `train` sections; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub value_dim: Option<usize>,
    #[arg(long)]
    pub mlp: Option<usize>,
    /// Retained Fourier modes of inputs and outputs.
    #[arg(long)]
    pub modes: Option<usize>,
    /// exp_dot, rbf or l2.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub tie_weights: bool,
    /// Drop the block on the output stream.
    #[arg(long)]
    pub no_g: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Operators per step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub query_count: Option<usize>,
    #[arg(long)]
    pub context_min: Option<usize>,
    #[arg(long)]
    pub context_max: Option<usize>,
    /// Loss on reconstructed values (grid) or on features (mode).
    #[arg(long)]
    pub loss_space: Option<String>,
    /// Write a checkpoint every this many steps.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    /// Continue from the checkpoint at --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Knn,
    Ridge,
}

#[derive(Args, Debug, Clone)]
pub struct BaselineArgs {
    #[arg(long, value_delimiter = ',', default_value = "knn,ridge")]
    pub baselines: Vec<Baseline>,
    #[arg(long, default_value_t = 1)]
    pub knn_k: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub ridge_lambda: f64,
    /// Fixed RBF bandwidth; the median heuristic otherwise.
    #[arg(long)]
    pub ridge_gamma: Option<f64>,
    /// Compare inputs by raw values (grid) or Fourier features (mode).
    #[arg(long, default_value = "grid")]
    pub baseline_space: String,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub meta_test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,32")]
    pub contexts: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
    #[command(flatten)]
    pub baselines: BaselineArgs,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
    /// Full reports with per-operator errors.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtrapolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
    pub l: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub t: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub n_datasets: usize,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 20)]
    pub context: usize,
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OutliersArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Container holding the dataset to screen.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Which operator of the container to screen.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Replace this fraction of the dataset with pairs from --source.
    #[arg(long, requires = "source")]
    pub contaminate: Option<f64>,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub source_index: usize,
    #[arg(long, default_value_t = 500)]
    pub regressions: usize,
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    /// Per-element error used for flagging: rmse (relative) or mse.
    #[arg(long, default_value = "rmse")]
    pub score: String,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-element scores as CSV.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(subcommand)]
    pub mode: ClassifyMode,
}

#[derive(Args, Debug, Clone)]
pub struct IdxArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
}

#[derive(Subcommand, Debug)]
pub enum ClassifyMode {
    /// Meta-train on freshly permuted copies of the images.
    Train {
        #[command(flatten)]
        data: IdxArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 30)]
        context_min: usize,
        #[arg(long, default_value_t = 60)]
        context_max: usize,
        #[arg(long, default_value_t = 20)]
        query_count: usize,
    },
    /// Accuracy of a checkpoint on one fixed permutation.
    Test {
        #[command(flatten)]
        data: IdxArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images the context is drawn from (defaults to the query images).
        #[arg(long, requires = "support_labels")]
        support_images: Option<PathBuf>,
        #[arg(long)]
        support_labels: Option<PathBuf>,
        /// Pixel permutation seed; identity when absent.
        #[arg(long)]
        pixel_perm_seed: Option<u64>,
        /// Class permutation seed; identity when absent.
        #[arg(long)]
        class_perm_seed: Option<u64>,
        #[arg(long, default_value_t = 50)]
        context: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
