use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ctcg_core::guided::GuideVariant;
use ctcg_core::Direction;

#[derive(Parser, Debug)]
#[command(name = "ctcg", version, about = "CTC and guided CTC training pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic train/held-out dataset pair
    GenData(GenDataArgs),
    /// Train a model with the plain CTC loss
    Train(TrainArgs),
    /// Train a model with CTC plus the guide loss from a frozen guiding model
    TrainGuided(TrainGuidedArgs),
    /// Train a student on fused teacher posteriors
    Distill(DistillArgs),
    /// Greedy-decode every utterance of a dataset
    Decode(ModelDataArgs),
    /// Report the sequence error rate of a model
    Eval(ModelDataArgs),
    /// Report the sequence error rate of fused posteriors
    FuseEval(FuseEvalArgs),
    /// Coverage of model A's spikes by model B's spikes
    AnalyzeCoverage(CoverageArgs),
    /// Write one utterance's posteriors as CSV
    DumpPosteriors(DumpArgs),
    /// Write the guiding model's spike masks as CSV
    ExportMasks(ExportMasksArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Alphabet file replacing the dataset's own (symbols must agree)
    #[arg(long)]
    pub alphabet: Option<PathBuf>,
    /// Comma-separated symbols excluded from spike extraction
    #[arg(long, value_delimiter = ',')]
    pub ignore_symbols: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory for train.ds, heldout.ds and alphabet.txt
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train_count: usize,
    #[arg(long, default_value_t = 200)]
    pub heldout_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub alphabet_size: usize,
    #[arg(long, default_value_t = 8)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub min_symbols: usize,
    #[arg(long, default_value_t = 8)]
    pub max_symbols: usize,
    #[arg(long, default_value_t = 2)]
    pub min_segment: usize,
    #[arg(long, default_value_t = 6)]
    pub max_segment: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise_stddev: f64,
    #[arg(long, default_value_t = ctcg_core::data::REFERENCE_PROTOTYPE_SCALE)]
    pub prototype_scale: f64,
    /// Allow the same symbol twice in a row
    #[arg(long)]
    pub allow_repeats: bool,
}

#[derive(Args, Debug)]
pub struct TrainCommon {
    #[command(flatten)]
    pub data: DataArgs,
    /// Held-out dataset; without it a 10% hash split of --data is held out
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// key=value training configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (model.ctcg, metrics.csv, checkpoints/)
    #[arg(long)]
    pub out: PathBuf,
    /// Batch-order seed [default: config or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter initialization seed [default: config or 0]
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Number of epochs [default: config or 20]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: config or 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: config or 0.03]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden units per direction [default: config or 32]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Recurrent layers [default: config or 1]
    #[arg(long)]
    pub num_layers: Option<usize>,
    /// uni or bi [default: config or uni]
    #[arg(long)]
    pub direction: Option<Direction>,
    /// Extra configuration override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Initialize the encoder from this model; the output layer is re-drawn
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Resume from an epoch checkpoint stem such as out/checkpoints/epoch-005
    #[arg(long)]
    pub resume_from: Option<PathBuf>,
    /// Skip per-epoch checkpoints
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainCommon,
}

#[derive(Args, Debug)]
pub struct TrainGuidedArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Frozen guiding model
    #[arg(long)]
    pub guiding_model: PathBuf,
    /// Guide loss weight [default: config or 1.0]
    #[arg(long)]
    pub guide_weight: Option<f64>,
    /// linear or log [default: config or linear]
    #[arg(long)]
    pub guide_variant: Option<GuideVariant>,
    /// Mask cache: read if present, otherwise written
    #[arg(long)]
    pub mask_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Comma-separated teacher models
    #[arg(long, value_delimiter = ',', required = true)]
    pub teachers: Vec<PathBuf>,
    /// Comma-separated fusion weights [default: uniform]
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Weight of the KD term against CTC [default: config or 1.0]
    #[arg(long)]
    pub kd_weight: Option<f64>,
    /// Teacher posterior cache: read if present, otherwise written
    #[arg(long)]
    pub teacher_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct FuseEvalArgs {
    /// Comma-separated member models
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// Comma-separated fusion weights [default: uniform]
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Frames of slack either side of a spike
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Match spikes by frame only, ignoring the symbol
    #[arg(long)]
    pub frame_only: bool,
    /// Minimum posterior for a spike
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Append a row to this coverage report CSV
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Pair name for the report row
    #[arg(long, default_value = "pair")]
    pub pair_name: String,
    /// Split name for the report row
    #[arg(long, default_value = "heldout")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub utterance_id: String,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportMasksArgs {
    #[arg(long)]
    pub guiding_model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output CSV (utterance_id,frame,symbol)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the binary mask cache here
    #[arg(long)]
    pub cache: Option<PathBuf>,
}
