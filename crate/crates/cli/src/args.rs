//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stainseg_core::eval::AbsentClass;
use stainseg_core::train::TrainMode;

/// Environment variable naming the default output root; each subcommand
/// writes to `<root>/<subcommand>` when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "STAINSEG_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "stainseg", version, about = "Stain-domain translation and epithelium segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded two-domain synthetic dataset.
    Synth(SynthArgs),
    /// Label CK-domain patches with the color-deconvolution heuristic.
    CkSegment(CkSegmentArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint.
    Predict(PredictArgs),
    /// Tumor-cell scores of label masks.
    Score(ScoreArgs),
    /// Compare predicted masks with ground truth.
    Evaluate(EvaluateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::CkSegment(_) => "ck-segment",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Score(_) => "score",
            Command::Evaluate(_) => "evaluate",
        }
    }

    pub fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Synth(a) => a.out.as_ref(),
            Command::CkSegment(a) => a.out.as_ref(),
            Command::Train(a) => a.out.as_ref(),
            Command::Predict(a) => a.out.as_ref(),
            Command::Score(a) => a.out.as_ref(),
            Command::Evaluate(a) => a.out.as_ref(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with `[synth]` and `[splits]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub train_a: Option<usize>,
    #[arg(long)]
    pub train_b: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub validation: Option<usize>,
    /// Share of domain-A training patches that keep their labels.
    #[arg(long)]
    pub annotation_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CkSegmentArgs {
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file mirroring the CK labeling settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// TOML file with `rows = [[r, g, b], [r, g, b], [r, g, b]]`.
    #[arg(long)]
    pub stains: Option<PathBuf>,
    #[arg(long)]
    pub close_radius: Option<i64>,
    /// Row of the stain matrix holding the CK stain.
    #[arg(long)]
    pub ck_channel: Option<usize>,
    #[arg(long)]
    pub min_density: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dasgan,
    SegReal,
    SegSynth,
    TwoStep,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dasgan => TrainMode::Dasgan,
            ModeArg::SegReal => TrainMode::SegOnlyReal,
            ModeArg::SegSynth => TrainMode::SegOnlySynth,
            ModeArg::TwoStep => TrainMode::TwoStep,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// TOML file mirroring the training configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub lambda_seg: Option<f64>,
    #[arg(long)]
    pub lambda_cycle: Option<f64>,
    /// Generator learning rate.
    #[arg(long)]
    pub g_lr: Option<f64>,
    /// Discriminator and segmenter learning rate.
    #[arg(long)]
    pub d_lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint directory (`checkpoints/iter-*` of a training run).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub tile: usize,
    #[arg(long, default_value_t = 64)]
    pub overlap: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Directory of label masks.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AbsentArg {
    One,
    Exclude,
}

impl From<AbsentArg> for AbsentClass {
    fn from(a: AbsentArg) -> Self {
        match a {
            AbsentArg::One => AbsentClass::One,
            AbsentArg::Exclude => AbsentClass::Exclude,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference masks with matching file names.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// F1 of a class absent from both masks.
    #[arg(long, value_enum, default_value_t = AbsentArg::One)]
    pub absent: AbsentArg,
}
