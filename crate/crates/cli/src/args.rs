use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regprompt::fusion::Strategy;
use regprompt::segmenter::SegmenterSpec;

#[derive(Debug, Parser)]
#[command(
    name = "regprompt",
    version,
    about = "Registration-driven point prompts for promptable segmentation"
)]
pub struct Cli {
    /// JSON run configuration (registration, filter policy, inverse, phantom and preprocessing sections)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for per-reference work [default: available parallelism]
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    /// Log format on stderr
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    pub log: LogFormat,

    /// Seed for every random draw (phantom deformations and noise)
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic knee case: a new image with ground truth and a reference library
    Phantom(PhantomArgs),
    /// Clip intensities and center-crop or pad a volume to a fixed size
    Preprocess(PreprocessArgs),
    /// Register a moving image to a fixed image
    Register(RegisterArgs),
    /// Segment a new image with a reference library
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth
    Evaluate(EvaluateArgs),
    /// Send the golden protocol fixtures to an external segmenter backend
    ProtocolCheck(ProtocolCheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,

    /// Number of deformed reference phantoms
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub references: u32,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Volume to read (.nii, or raw payload with JSON sidecar)
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,

    /// Where to write the result; the extension selects the format
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,

    /// Target matrix size, e.g. 512,512,40 [default: from config, else 512,512,40]
    #[arg(long, value_name = "X,Y,Z", value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,

    /// Intensity window, e.g. 0,3000 [default: from config, else 0,3000]
    #[arg(long, value_name = "LO,HI", value_parser = parse_clip, allow_hyphen_values = true)]
    pub clip: Option<[f64; 2]>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Fixed (reference) image
    #[arg(long, value_name = "FILE")]
    pub fixed: PathBuf,

    /// Moving (new) image
    #[arg(long, value_name = "FILE")]
    pub moving: PathBuf,

    /// Registration parameters as JSON; overrides the config file's section
    #[arg(long, value_name = "FILE")]
    pub registration: Option<PathBuf>,

    /// Where to write the transform (JSON)
    #[arg(long, value_name = "FILE")]
    pub transform: PathBuf,

    /// Also write the moving image resampled onto the fixed grid
    #[arg(long, value_name = "FILE")]
    pub resampled: Option<PathBuf>,

    /// Also write the inverse displacement field sampled on the moving grid
    #[arg(long, value_name = "FILE")]
    pub inverse: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// New image to segment
    #[arg(long = "new", value_name = "FILE")]
    pub new_image: PathBuf,

    /// Reference library manifest (JSON)
    #[arg(long, value_name = "FILE")]
    pub library: PathBuf,

    /// Fusion strategy: i-align, p-align, atlas or no-reg
    #[arg(long, default_value = "i-align")]
    pub strategy: Strategy,

    /// Segmentation backend: toy[:tau], exec:<command> or tcp:<host>:<port>
    #[arg(long, default_value = "toy")]
    pub segmenter: SegmenterSpec,

    /// Per-request backend timeout in seconds
    #[arg(long, default_value_t = 120.0, value_name = "SECONDS")]
    pub timeout: f64,

    /// Registration parameters as JSON; overrides the config file's section
    #[arg(long, value_name = "FILE")]
    pub registration: Option<PathBuf>,

    /// Only these structures (comma separated) [default: all in the library]
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    pub structures: Option<Vec<String>>,

    /// Output directory for fused masks and provenance.json
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted masks named <structure>.nii
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,

    /// Directory of ground-truth masks named <structure>.nii
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,

    /// Case identifier used in the report
    #[arg(long, default_value = "case")]
    pub case_id: String,

    /// Where to write the JSON report
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Also write one CSV row per structure
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProtocolCheckArgs {
    /// Backend under test: exec:<command> or tcp:<host>:<port>
    #[arg(long)]
    pub segmenter: SegmenterSpec,

    /// Fixture directory holding requests.jsonl and expected.jsonl [default: built-in suite]
    #[arg(long, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,

    /// Per-request timeout in seconds
    #[arg(long, default_value_t = 120.0, value_name = "SECONDS")]
    pub timeout: f64,
}

fn parse_list<T: std::str::FromStr, const N: usize>(s: &str) -> Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<Result<_, _>>()?;
    let n = parts.len();
    parts
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_clip(s: &str) -> Result<[f64; 2], String> {
    parse_list(s)
}
