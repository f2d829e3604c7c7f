//! The `dsdf` command line: dataset generation, the three training phases,
//! sampling, completion, evaluation and mesh export.
//!
//! Exit codes are 0 on success, 1 for usage errors and 2 for runtime
//! failures. Every command prints its resolved settings as JSON and writes the
//! same JSON next to its outputs.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsdf_core::{Conditioning, TrainConfig};
use serde::Serialize;

mod commands;
mod error;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "dsdf", version, about = "Latent diffusion over neural signed distance functions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural dataset: manifest, shape specs and surface clouds.
    GenData(GenDataArgs),
    /// Train the point encoder, VAE and SDF decoder.
    TrainMod(TrainModArgs),
    /// Encode every dataset shape to its posterior mean latent.
    ExtractLatents(ExtractArgs),
    /// Train the denoiser on extracted latents.
    TrainDiff(TrainDiffArgs),
    /// Jointly fine-tune both models.
    Finetune(FinetuneArgs),
    /// Sample unconditional shapes and mesh them.
    Sample(SampleArgs),
    /// Complete a partial point cloud.
    Complete(CompleteArgs),
    /// Score generated shapes or completions.
    Eval(EvalArgs),
    /// Mesh one saved latent.
    Mesh(MeshArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 32)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Surface points per cloud.
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConditioningArg {
    None,
    CrossAttention,
    Concat,
}

impl From<ConditioningArg> for Conditioning {
    fn from(c: ConditioningArg) -> Self {
        match c {
            ConditioningArg::None => Conditioning::None,
            ConditioningArg::CrossAttention => Conditioning::CrossAttention,
            ConditioningArg::Concat => Conditioning::Concat,
        }
    }
}

/// Training hyperparameters. Values come from the defaults, then `--config`,
/// then any flag given explicitly.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub encoder_points: Option<usize>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub condition_dropout: Option<f64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Number of diffusion timesteps T.
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub conditioning: Option<ConditioningArg>,
}

#[derive(Debug, Args)]
pub struct TrainModArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint already in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    /// Modulation checkpoint, or the directory holding it.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainDiffArgs {
    /// Latent manifest, or the directory holding it.
    #[arg(long)]
    pub latents: PathBuf,
    /// Modulation checkpoint supplying the feature sizes and the condition
    /// encoder's starting weights.
    #[arg(long)]
    pub modulation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Directory with both checkpoints.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub freeze_sdf: bool,
    #[arg(long)]
    pub freeze_denoiser: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompleteArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// XYZ cloud: a full cloud to sample 128 points from and crop to 64,
    /// or the partial input itself with `--raw-partial`.
    #[arg(long)]
    pub partial: PathBuf,
    #[arg(long)]
    pub raw_partial: bool,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Mesh only completions with CONS at or below this value.
    #[arg(long)]
    pub cons_threshold: Option<f64>,
    /// Average signed rather than absolute decoded distances for CONS.
    #[arg(long)]
    pub signed_cons: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// MMD, COV and 1-NNA of generated shapes against references.
    Uncond,
    /// TMD and UHD of completions of one partial cloud.
    Completion,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Directory of generated `.obj` meshes or `.xyz` clouds.
    #[arg(long)]
    pub gen: PathBuf,
    /// Directory of reference meshes or clouds (uncond mode).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Partial input cloud (completion mode).
    #[arg(long)]
    pub partial: Option<PathBuf>,
    /// Evaluation runs; the report keeps the best value of each metric.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per cloud; meshes are sampled and larger clouds subsampled.
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    /// Record elapsed time in the report, which then differs between runs.
    #[arg(long)]
    pub wall_clock: bool,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MeshArgs {
    /// Modulation checkpoint, or the directory holding it.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Latent file written by `sample` or `extract-latents`.
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    /// Defaults, overlaid by `--config`, overlaid by explicit flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    c.$($field)+ = v.into();
                }
            };
        }
        set!(seed => seed);
        set!(steps => steps);
        set!(batch_size => batch_size);
        set!(lr => learning_rate);
        set!(queries => queries_per_shape);
        set!(encoder_points => encoder_points);
        set!(kl_weight => kl_weight);
        set!(condition_dropout => condition_dropout);
        set!(log_every => log_every);
        set!(checkpoint_every => checkpoint_every);
        set!(latent_dim => modulation.latent_dim);
        set!(feature_dim => modulation.feature_dim);
        set!(model_dim => denoiser.model_dim);
        set!(blocks => denoiser.blocks);
        set!(heads => denoiser.heads);
        set!(diffusion_steps => schedule.steps);
        set!(conditioning => denoiser.conditioning);
        Ok(c)
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
