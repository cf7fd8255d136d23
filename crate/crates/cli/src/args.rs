//! Command-line interface definition.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mno",
    version,
    about = "Multiscale neural operator for flow fields on 3D point clouds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic point-set corpus (MNO1 files plus manifest).
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, history, and a run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Train one model per module mask and emit the ablation table.
    Ablate(AblateArgs),
    /// Validate reverse-mode gradients against finite differences (f64).
    Gradcheck(GradcheckArgs),
    /// Measure per-module wall time as N (or M) grows.
    Bench(BenchArgs),
    /// Dump per-point truth/prediction/error columns as CSV.
    DumpFields(DumpFieldsArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Generator: sphere-flow or gaussian-field.
    #[arg(long)]
    pub generator: String,
    /// Shell/interior point count per sample.
    #[arg(long)]
    pub n: usize,
    /// Number of samples (seeds are consecutive from --seed).
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Additive Gaussian target noise (standard deviation).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Freestream speed for sphere-flow.
    #[arg(long, default_value_t = 1.0)]
    pub freestream: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Architecture flags; unset values fall back to the config file, then to
/// the recipe defaults.
#[derive(Args)]
pub struct ModelFlags {
    /// Flat key=value config file (a run manifest works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Latent dimension D.
    #[arg(long)]
    pub d: Option<usize>,
    /// Mode count M of the global module.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Neighbor count of the local module.
    #[arg(long)]
    pub k: Option<usize>,
    /// Module mask: letters from G, L, M (e.g. GLM, GL).
    #[arg(long)]
    pub mask: Option<String>,
}

#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak one-cycle learning rate.
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Field grouping, e.g. "velocity=0..3,pressure=3..4" or
    /// "x1=0..3,x2=3..6;total=x".
    #[arg(long)]
    pub grouping: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of .mno1 training files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional held-out validation directory.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Fraction of the dataset held out for validation when --val-data is
    /// absent (deterministic tail split).
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Field grouping override (defaults to the checkpoint's).
    #[arg(long)]
    pub grouping: Option<String>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Comma-separated module masks, e.g. G,L,M,GL,GM,LM,GLM.
    #[arg(long)]
    pub masks: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out test directory; defaults to a deterministic 10% tail split.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Point-set file to check against; a micro sphere-flow sample is
    /// generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value = "GLM")]
    pub mask: String,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional per-parameter CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Module to time: global, local, or micro.
    #[arg(long)]
    pub module: String,
    /// Comma-separated point counts for the N sweep.
    #[arg(long, default_value = "1000,2000,4000,8000")]
    pub n: String,
    /// Mode counts for a global-module M sweep (overrides the N sweep).
    #[arg(long)]
    pub m_list: Option<String>,
    /// Fixed N for the M sweep.
    #[arg(long, default_value_t = 4000)]
    pub fixed_n: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Repetitions per point; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional CSV output file (also printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DumpFieldsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single .mno1 file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}
