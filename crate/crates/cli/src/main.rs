mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cloudseg_core::dataset::SubmissionScale;
use cloudseg_core::encoder::Variant;

#[derive(Debug, Parser)]
#[command(name = "cloudseg", version, about = "Cloud-pattern segmentation toolkit")]
pub struct Cli {
    /// Seed for every random choice (weights, splits, augmentation, shuffles).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for convolution and prediction (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file supplying defaults for any flag of the chosen verb.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the block table and parameter counts of a model variant as JSON.
    Describe(DescribeArgs),
    /// Encode a 0/255 grayscale mask image as an RLE line.
    Encode(EncodeArgs),
    /// Decode an RLE line into a 0/255 grayscale mask image.
    Decode(DecodeArgs),
    /// Rescale every mask of a submission CSV (decode, subsample, encode).
    ScaleMasks(ScaleMasksArgs),
    /// Write originals plus one randomly transformed copy of each image.
    Augment(AugmentArgs),
    /// Split an annotations CSV into train and validation CSVs by image.
    Split(SplitArgs),
    /// Run the model on one image and dump a tensor.
    Forward(ForwardArgs),
    /// Train the 4-class head on frozen features.
    TrainHead(TrainHeadArgs),
    /// Predict masks for a directory of images and write a submission CSV.
    Predict(PredictArgs),
    /// Mean Dice of a submission against ground truth.
    Score(ScoreArgs),
    /// Precision-recall curve of scored labels.
    PrCurve(PrCurveArgs),
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not of the form HEIGHTxWIDTH"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let size = (parse(h)?, parse(w)?);
    if size.0 == 0 || size.1 == 0 {
        return Err(format!("`{s}` has a zero extent"));
    }
    Ok(size)
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: cloudseg_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// b0..b5, or `all`.
    #[arg(long, default_value = "b0")]
    pub variant: String,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub mask: PathBuf,
    /// Write the RLE line here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// RLE text, e.g. "1 3 10 2".
    #[arg(
        long,
        conflicts_with = "rle_file",
        required_unless_present = "rle_file",
        allow_hyphen_values = true
    )]
    pub rle: Option<String>,
    #[arg(long)]
    pub rle_file: Option<PathBuf>,
    /// Mask size as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScaleMasksArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Size the input masks are encoded at.
    #[arg(long, value_parser = parse_size, default_value = "1400x2100")]
    pub from: (usize, usize),
    /// Per-side factor, the reciprocal of an integer.
    #[arg(long, default_value_t = 0.25)]
    pub factor: f64,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input_dir: PathBuf,
    /// Annotations CSV; masks are decoded at each image's own size.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Receives train.csv and val.csv.
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForwardOutput {
    Logits,
    Probs,
    /// Decoder output feeding the head.
    Trunk,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_variant, default_value = "b0")]
    pub variant: Variant,
    /// Weight-store directory (manifest.json + weights.bin); seeded random weights when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Model input size, divisible by 32.
    #[arg(long, value_parser = parse_size, default_value = "1312x2080")]
    pub input_size: (usize, usize),
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// Raw little-endian f32 dump; the shape goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ForwardOutput::Logits)]
    pub output: ForwardOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureSource {
    /// Fixed texture filter bank (4 features).
    Texture,
    /// Frozen encoder-decoder trunk (the model's own head input).
    Decoder,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory holding the images named in `--annotations`.
    #[arg(long, conflicts_with = "synthetic", requires = "annotations")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Train on this many generated texture images instead of a dataset.
    #[arg(long, required_unless_present = "data_dir")]
    pub synthetic: Option<usize>,
    /// Training resolution: images and masks are resized to it.
    #[arg(long, value_parser = parse_size, default_value = "64x64")]
    pub size: (usize, usize),
    #[arg(long, value_enum, default_value_t = FeatureSource::Texture)]
    pub features: FeatureSource,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Weight-store directory for the trained head (the whole model for `--features decoder`).
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV (epoch,loss; epoch 0 is before training).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Native,
    /// Threshold at full size, then subsample the masks to 350×525.
    Quarter,
    /// Resample probabilities to quarter size, then threshold.
    QuarterResampled,
}

impl From<ScaleArg> for SubmissionScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Native => SubmissionScale::Native,
            ScaleArg::Quarter => SubmissionScale::Quarter,
            ScaleArg::QuarterResampled => SubmissionScale::QuarterResampled,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub images_dir: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long, value_enum, default_value_t = ScaleArg::Native)]
    pub scale: ScaleArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Size both files are encoded at.
    #[arg(long, value_parser = parse_size, default_value = "1400x2100")]
    pub size: (usize, usize),
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrCurveArgs {
    /// CSV with columns score,label (label 0/1 or true/false).
    #[arg(long)]
    pub input: PathBuf,
    /// Curve CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;

/// I/O failures exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<cloudseg_core::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        }
        if let Some(e) = cause.downcast_ref::<image::ImageError>() {
            return match e {
                image::ImageError::IoError(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let argv = match config::merged_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
