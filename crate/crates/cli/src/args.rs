//! Command-line surface: one subcommand per pipeline stage.
//!
//! Flags that shadow config-file keys are plain strings parsed by the
//! same token rules as the file, so `--weighting fixed` and a
//! `weighting = fixed` line can never drift apart.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "hcal",
    version,
    about = "Hierarchy-aware contrastive classification: synthesis, training, evaluation, and audits",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic hierarchical Gaussian dataset.
    Synth(SynthArgs),
    /// Train a model from a config file plus flag overrides.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Recompute metrics from prediction and truth files.
    Metrics(MetricsArgs),
    /// Audit analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Class counts per level, comma separated, in either orientation;
    /// adjacent counts must nest by divisibility (2,4,8 and 8,4,2 both
    /// mean 8 finest classes grouped into 4 then 2).
    #[arg(long, value_name = "COUNTS")]
    pub levels: String,

    /// Samples drawn per finest class.
    #[arg(long = "per-class", value_name = "N", default_value_t = 100)]
    pub per_class: usize,

    /// Raw feature dimension.
    #[arg(long, value_name = "DIM", default_value_t = 16)]
    pub input_dim: usize,

    /// Radius of the sphere the top-level means sit on.
    #[arg(long, value_name = "FLOAT", default_value_t = 10.0)]
    pub separation: f64,

    /// Standard deviation of the noise around each finest-class mean.
    #[arg(long, value_name = "FLOAT", default_value_t = 0.5)]
    pub sigma: f64,

    /// Fraction of each finest class routed to the training split.
    #[arg(long = "train-fraction", value_name = "FLOAT", default_value_t = 0.8)]
    pub train_fraction: f64,

    /// Generator seed; HCAL_SEED overrides it when set.
    #[arg(long, value_name = "SEED", default_value_t = 42)]
    pub seed: u64,

    /// Directory for train.jsonl, test.jsonl, and taxonomy.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config file; flags below override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Taxonomy JSON.
    #[arg(long, value_name = "FILE")]
    pub taxonomy: Option<PathBuf>,

    /// Training split JSONL.
    #[arg(long = "train-data", value_name = "FILE")]
    pub train_data: Option<PathBuf>,

    /// Held-out split JSONL, recorded in the echo for later evaluation.
    #[arg(long = "test-data", value_name = "FILE")]
    pub test_data: Option<PathBuf>,

    /// Output directory for report.csv and checkpoint.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Resume from this checkpoint and continue to the epoch target.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,

    /// Also write level-1 embeddings and prototypes as CSV.
    #[arg(long = "dump-embeddings")]
    pub dump_embeddings: bool,

    /// Total epoch target (required here or in the config file).
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,

    #[arg(long = "batch-size", value_name = "N")]
    pub batch_size: Option<usize>,

    /// Root seed; HCAL_SEED overrides it when set.
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,

    #[arg(long = "lr-encoder", value_name = "FLOAT")]
    pub lr_encoder: Option<f64>,

    #[arg(long = "lr-proto-level1", value_name = "FLOAT")]
    pub lr_proto_level1: Option<f64>,

    #[arg(long = "proto-lr-multiplier", value_name = "FLOAT")]
    pub proto_lr_multiplier: Option<f64>,

    #[arg(long, value_name = "FLOAT")]
    pub momentum: Option<f64>,

    #[arg(long = "weight-decay", value_name = "FLOAT")]
    pub weight_decay: Option<f64>,

    /// Softmax temperature of the adaptive weighting.
    #[arg(long, value_name = "FLOAT")]
    pub gamma: Option<f64>,

    /// Prototype perturbation radius.
    #[arg(long, value_name = "FLOAT")]
    pub epsilon: Option<f64>,

    /// Contrastive temperature.
    #[arg(long, value_name = "FLOAT")]
    pub tau: Option<f64>,

    /// Embedding dimension.
    #[arg(long = "output-dim", value_name = "DIM")]
    pub output_dim: Option<usize>,

    /// Comma-separated hidden layer widths, or `none`.
    #[arg(long = "hidden-dims", value_name = "LIST")]
    pub hidden_dims: Option<String>,

    /// Encoder layers that train: `all` or `last_layer`.
    #[arg(long, value_name = "SCOPE")]
    pub trainable: Option<String>,

    /// `adaptive` or `fixed`.
    #[arg(long, value_name = "MODE")]
    pub weighting: Option<String>,

    /// Comma-separated per-level weights summing to 1, or `none`.
    #[arg(long = "fixed-weights", value_name = "LIST")]
    pub fixed_weights: Option<String>,

    /// Losses feeding the weighting: `current` or `previous`.
    #[arg(long = "weight-source", value_name = "MODE")]
    pub weight_source: Option<String>,

    /// Loss smoothing coefficient in [0, 1), or `none`.
    #[arg(long = "weight-ema", value_name = "COEF")]
    pub weight_ema: Option<String>,

    /// `base_and_perturbed` or `base_only`.
    #[arg(long, value_name = "SET")]
    pub negatives: Option<String>,

    /// `per_step`, `static`, or `off`.
    #[arg(long = "perturb-mode", value_name = "MODE")]
    pub perturb_mode: Option<String>,

    /// `sample_weighted` or `child_mean`.
    #[arg(long, value_name = "MODE")]
    pub aggregation: Option<String>,

    /// Disable a mechanism: `multi_task`, `aggregation`, `perturbation`,
    /// or `adaptive`. Repeatable, takes comma lists, and `none` clears a
    /// list inherited from the config file.
    #[arg(long, value_name = "NAME")]
    pub ablate: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint JSON written by `hcal train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    /// Dataset to evaluate, JSONL.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,

    /// Taxonomy JSON.
    #[arg(long, value_name = "FILE")]
    pub taxonomy: PathBuf,

    /// Output directory for predictions.jsonl and metrics.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Inference mode: `per_sample` or `batch_grouped`.
    #[arg(long, value_name = "MODE", default_value = "per_sample")]
    pub mode: String,

    /// Headline violation-rate normalization: `edge_fraction` or
    /// `paper_eq15`. The metrics document always carries both values.
    #[arg(long = "hvr-norm", value_name = "NORM", default_value = "edge_fraction")]
    pub hvr_norm: String,

    /// Also write level-1 embeddings and prototypes as CSV.
    #[arg(long = "dump-embeddings")]
    pub dump_embeddings: bool,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Predictions JSONL with `id` and `pred` fields.
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,

    /// Ground-truth dataset JSONL.
    #[arg(long, value_name = "FILE")]
    pub truth: PathBuf,

    /// Taxonomy JSON.
    #[arg(long, value_name = "FILE")]
    pub taxonomy: PathBuf,

    /// Optional output directory; the document always goes to stdout.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Headline violation-rate normalization: `edge_fraction` or
    /// `paper_eq15`.
    #[arg(long = "hvr-norm", value_name = "NORM", default_value = "edge_fraction")]
    pub hvr_norm: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Fixture seed; HCAL_SEED overrides it when set.
    #[arg(long, value_name = "SEED", default_value_t = 42)]
    pub seed: u64,

    /// Multiplier applied to the analytic gradient before comparison,
    /// there to prove the check can fail. 1 is the honest gradient.
    #[arg(long = "grad-scale", value_name = "FLOAT", default_value_t = 1.0)]
    pub grad_scale: f64,

    /// Shorthand for `--grad-scale 2`.
    #[arg(long, conflicts_with = "grad_scale")]
    pub corrupt: bool,

    /// Optional directory for gradcheck.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}
