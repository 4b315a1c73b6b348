//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "crg", version, about = "Cyclic reverse generator lab", args_override_self = true)]
pub struct Cli {
    /// Workspace root (the CRG_WORKSPACE environment variable takes precedence).
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat TOML or JSON file whose keys override the corresponding flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render a labelled synthetic face dataset.
    SynthGen(SynthGenArgs),
    /// Train a generator and discriminator adversarially on a dataset.
    TrainGan(TrainGanArgs),
    /// Train an encoder that inverts a generator.
    TrainEncoder(TrainEncoderArgs),
    /// Recover a latent for an image by gradient descent.
    Invert(InvertArgs),
    /// Build an attribute direction from reference images.
    Direction(DirectionArgs),
    /// Apply attribute directions to a latent and render the result.
    Edit(EditArgs),
    /// Project a labelled dataset onto a direction and fit per-class statistics.
    Analyze(AnalyzeArgs),
    /// Score reconstructions against the mean-image baseline.
    Eval(EvalArgs),
    /// Serve the editing HTTP API.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::TrainGan(_) => "train-gan",
            Command::TrainEncoder(_) => "train-encoder",
            Command::Invert(_) => "invert",
            Command::Direction(_) => "direction",
            Command::Edit(_) => "edit",
            Command::Analyze(_) => "analyze",
            Command::Eval(_) => "eval",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthGenArgs {
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Force this fraction of samples to wear eyewear (others wear almost none).
    /// Without it every attribute is uniform and eyewear >= 0.5 counts as attributed.
    #[arg(long)]
    pub attributed_fraction: Option<f64>,
    #[arg(long, default_value = "synth")]
    pub name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainGanArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub generator_widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub discriminator_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub generator_lr: Option<f64>,
    #[arg(long)]
    pub discriminator_lr: Option<f64>,
    #[arg(long)]
    pub d_steps_per_g_step: Option<usize>,
    #[arg(long)]
    pub monitor_every: Option<usize>,
    #[arg(long)]
    pub monitor_samples: Option<usize>,
    #[arg(long, default_value = "gan")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Fixed,
    CoTrained,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub generator: String,
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr_patience: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_rotation: Option<f64>,
    #[arg(long)]
    pub no_hflip: bool,
    #[arg(long)]
    pub no_vflip: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Fixed)]
    pub mode: ModeArg,
    #[arg(long, value_delimiter = ',')]
    pub encoder_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long, default_value = "encoder")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Mse,
    Mae,
}

#[derive(Debug, Args, Serialize)]
pub struct InvertArgs {
    /// Target image (PNG at the generator's resolution).
    #[arg(long)]
    pub image: PathBuf,
    /// Generator checkpoint; defaults to the generator of --model.
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Start from the encoder's estimate instead of a random draw.
    #[arg(long)]
    pub hybrid: bool,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, value_enum, default_value_t = LossArg::Mse)]
    pub loss: LossArg,
    /// JSON array to start from (otherwise a standard-normal draw from --seed).
    #[arg(long)]
    pub init_z: Option<PathBuf>,
    #[arg(long)]
    pub early_exit: Option<f64>,
    /// Where to write the recovered latent as JSON (printed when omitted).
    #[arg(long)]
    pub out_z: Option<PathBuf>,
    /// Where to write the rendering of the recovered latent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DirectionArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Neutral reference image; repeat together with --ref-attr to average several pairs.
    #[arg(long, required = true)]
    pub ref_neutral: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub ref_attr: Vec<PathBuf>,
    /// Attribute tag, also the stored file's name.
    #[arg(long)]
    pub name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, conflicts_with = "z", required_unless_present = "z")]
    pub z_from_image: Option<PathBuf>,
    /// JSON array with the source latent.
    #[arg(long)]
    pub z: Option<PathBuf>,
    /// Direction file or stored direction id; repeat to stack edits.
    #[arg(long, required = true)]
    pub direction: Vec<String>,
    /// Strength for each --direction, in order.
    #[arg(long, required = true, allow_negative_numbers = true)]
    pub k: Vec<f64>,
    /// Step along the unit direction instead of the raw one.
    #[arg(long)]
    pub unit_direction: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub direction: String,
    #[arg(long, default_value_t = crg_core::editing::DEFAULT_HISTOGRAM_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub dataset: String,
    /// Dataset whose mean image is the baseline reconstruction (defaults to --dataset).
    #[arg(long)]
    pub mean_reference: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Labelled dataset used for projection statistics and k ranges (defaults to the
    /// only dataset at the model resolution).
    #[arg(long)]
    pub dataset: Option<String>,
}
