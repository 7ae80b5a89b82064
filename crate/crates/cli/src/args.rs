use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "calvingseg",
    version,
    about = "Thin-structure segmentation pipeline: data, training, prediction, evaluation"
)]
pub struct Cli {
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true, default_value_t = 1, env = "CALVINGSEG_THREADS")]
    pub threads: usize,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory with a manifest.
    GenData(GenDataArgs),
    /// Train a network and write checkpoint, history and config.
    Train(TrainArgs),
    /// Predict probability maps and masks for a dataset split.
    Predict(PredictArgs),
    /// Turn zone masks into front-line masks.
    Postprocess(PostprocessArgs),
    /// Score predicted masks against ground truth at tolerance tiers.
    Evaluate(EvaluateArgs),
    /// Render the distance-map weights of a line mask as a 16-bit graymap.
    DistmapPreview(DistmapPreviewArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Zones,
    Lines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Bce,
    Wbce,
    DmapBce,
    Dw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorArg {
    Mcc,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentArg {
    None,
    FlipsAndRot90,
    FlipsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, env = "CALVINGSEG_SCENES")]
    pub scenes: usize,
    /// Scene size as HEIGHTxWIDTH.
    #[arg(long, default_value = "256x512", value_parser = parse_size, env = "CALVINGSEG_SIZE")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0, env = "CALVINGSEG_SEED")]
    pub seed: u64,
    #[arg(long, env = "CALVINGSEG_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5, env = "CALVINGSEG_ROUGHNESS")]
    pub roughness: f64,
    #[arg(long, default_value_t = 2, env = "CALVINGSEG_LOOKS")]
    pub looks: u32,
    #[arg(long, default_value_t = 2.0, env = "CALVINGSEG_CONTRAST")]
    pub contrast: f64,
    /// Meters per pixel.
    #[arg(long, default_value_t = 6.0, env = "CALVINGSEG_RESOLUTION")]
    pub resolution: f64,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_fractions, env = "CALVINGSEG_FRACTIONS")]
    pub fractions: (f64, f64, f64),
    /// Side of the square element used for line-thickening statistics.
    #[arg(long, default_value_t = 5, env = "CALVINGSEG_THICKEN")]
    pub thicken: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, env = "CALVINGSEG_DATA")]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long, env = "CALVINGSEG_OUT")]
    pub out: PathBuf,
    #[arg(long, value_enum, env = "CALVINGSEG_TARGET")]
    pub target: Target,
    #[arg(long, value_enum, default_value_t = LossArg::Bce, env = "CALVINGSEG_LOSS")]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = MonitorArg::Mcc, env = "CALVINGSEG_MONITOR")]
    pub monitor: MonitorArg,
    /// Distance-map background weight.
    #[arg(long, default_value_t = 0.1, env = "CALVINGSEG_K")]
    pub k: f64,
    /// Distance-map dilation size.
    #[arg(long, default_value_t = 3, env = "CALVINGSEG_W")]
    pub w: usize,
    /// Distance-map relaxation divisor.
    #[arg(long = "R", default_value_t = 1.0, env = "CALVINGSEG_R")]
    pub r: f64,
    #[arg(long, default_value_t = 30, env = "CALVINGSEG_PATIENCE")]
    pub patience: usize,
    #[arg(long, default_value_t = 0.0, env = "CALVINGSEG_MIN_DELTA")]
    pub min_delta: f64,
    #[arg(long, default_value_t = 0, env = "CALVINGSEG_SEED")]
    pub seed: u64,
    #[arg(long, default_value_t = 300, env = "CALVINGSEG_EPOCHS")]
    pub epochs: usize,
    #[arg(long, default_value_t = 256, env = "CALVINGSEG_PATCH_SIZE")]
    pub patch_size: usize,
    /// Defaults to 20 for zones and 15 for lines.
    #[arg(long, env = "CALVINGSEG_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Defaults to 1e-7 for zones and 1e-8 for lines.
    #[arg(long, env = "CALVINGSEG_LR_MIN")]
    pub lr_min: Option<f64>,
    /// Defaults to 1e-2 for zones and 1e-4 for lines.
    #[arg(long, env = "CALVINGSEG_LR_MAX")]
    pub lr_max: Option<f64>,
    /// Half-period of the cyclic learning rate in epochs.
    #[arg(long, default_value_t = 5, env = "CALVINGSEG_STEP_EPOCHS")]
    pub step_epochs: usize,
    /// Threshold for the validation MCC.
    #[arg(long, default_value_t = 0.5, env = "CALVINGSEG_TAU")]
    pub tau: f64,
    #[arg(long, default_value_t = 3, env = "CALVINGSEG_DEPTH")]
    pub depth: usize,
    #[arg(long, default_value_t = 8, env = "CALVINGSEG_BASE_CHANNELS")]
    pub base_channels: usize,
    #[arg(long, default_value_t = 2, env = "CALVINGSEG_CONVS_PER_BLOCK")]
    pub convs_per_block: usize,
    /// Side of the square convolution kernels.
    #[arg(long, default_value_t = 5, env = "CALVINGSEG_KERNEL")]
    pub kernel: usize,
    #[arg(long, value_enum, default_value_t = AugmentArg::FlipsAndRot90, env = "CALVINGSEG_AUGMENT")]
    pub augment: AugmentArg,
    /// Side of the square element that thickens line targets.
    #[arg(long, default_value_t = 5, env = "CALVINGSEG_THICKEN")]
    pub thicken: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    /// Run directory written by `train`.
    #[arg(long, env = "CALVINGSEG_RUN")]
    pub run: PathBuf,
    #[arg(long, env = "CALVINGSEG_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "CALVINGSEG_OUT")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test, env = "CALVINGSEG_SPLIT")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.5, env = "CALVINGSEG_TAU")]
    pub tau: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PostprocessArgs {
    /// Directory of zone masks (`*.pgm`).
    #[arg(long, env = "CALVINGSEG_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "CALVINGSEG_OUT")]
    pub out: PathBuf,
    /// Pixel adjacency for the largest component: 4 or 8.
    #[arg(long, default_value_t = 8, env = "CALVINGSEG_CONNECTIVITY")]
    pub connectivity: u32,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Directory of predicted masks named `<scene id>.pgm`.
    #[arg(long, env = "CALVINGSEG_PRED")]
    pub pred: PathBuf,
    #[arg(long, env = "CALVINGSEG_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "CALVINGSEG_OUT")]
    pub out: PathBuf,
    #[arg(long, value_enum, env = "CALVINGSEG_TARGET")]
    pub target: Target,
    #[arg(long, value_enum, default_value_t = SplitArg::Test, env = "CALVINGSEG_SPLIT")]
    pub split: SplitArg,
    /// Tolerance tiers in meters (line targets only).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "60,105,150",
        env = "CALVINGSEG_TOLERANCES"
    )]
    pub tolerances: Vec<f64>,
    /// Square element applied to ground-truth lines before scoring; 1 keeps them as drawn.
    #[arg(long, default_value_t = 1, env = "CALVINGSEG_GT_THICKEN")]
    pub gt_thicken: usize,
    /// Also write colour overlays of prediction and ground truth.
    #[arg(long, env = "CALVINGSEG_OVERLAY")]
    pub overlay: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DistmapPreviewArgs {
    /// Line mask (`.pgm`).
    #[arg(long, env = "CALVINGSEG_LINES")]
    pub lines: PathBuf,
    /// Output 16-bit graymap.
    #[arg(long, env = "CALVINGSEG_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1, env = "CALVINGSEG_K")]
    pub k: f64,
    #[arg(long, default_value_t = 3, env = "CALVINGSEG_W")]
    pub w: usize,
    #[arg(long = "R", default_value_t = 1.0, env = "CALVINGSEG_R")]
    pub r: f64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!(
            "expected three comma-separated fractions, got '{s}'"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_fraction_parsing() {
        assert_eq!(parse_size("256x512"), Ok((256, 512)));
        assert!(parse_size("256").is_err());
        assert_eq!(parse_fractions("0.5, 0.25,0.25"), Ok((0.5, 0.25, 0.25)));
        assert!(parse_fractions("1,0").is_err());
    }

    #[test]
    fn command_line_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
