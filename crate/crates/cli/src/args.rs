use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lungpatch_core::{GridSpec, LabelMode, SegConfig, ThresholdMode};

#[derive(Debug, Parser)]
#[command(
    name = "lungpatch",
    version,
    about = "Patch-based lung nodule detection workbench"
)]
pub struct Cli {
    /// Seed for every random choice (split, initialization, shuffling, synthetic data).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Dataset manifest (line-delimited case records).
    #[arg(long, global = true, env = "LUNGPATCH_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lung mask for one image, or for every manifest case.
    Segment(SegmentArgs),
    /// Cut lungs into grid patches with a geometry sidecar.
    Slice(SliceArgs),
    /// Per-patch label vectors from manifest nodule boxes or an annotation log.
    LabelTransform(LabelArgs),
    /// Assign unassigned manifest cases to train/val, 3:1.
    Split,
    Train(TrainArgs),
    /// Threshold and rank metrics, overall and by difficulty.
    Eval(EvalArgs),
    /// Per-patch probabilities.
    Predict(PredictArgs),
    /// Positive-class activation maps as PNG.
    Cam(CamArgs),
    /// Deterministic synthetic radiographs with known lungs and nodules.
    GenSynthetic(SynthArgs),
    /// Run the annotation and triage HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Threshold {
    Otsu,
    Fixed,
}

#[derive(Debug, Clone, Args)]
pub struct SegFlags {
    #[arg(long, value_enum, default_value = "otsu")]
    pub seg_threshold: Threshold,
    /// Intensity for `--seg-threshold fixed`.
    #[arg(long, default_value_t = 100)]
    pub seg_fixed: u8,
    #[arg(long, default_value_t = 2)]
    pub open_radius: usize,
    #[arg(long, default_value_t = 4)]
    pub close_radius: usize,
    #[arg(long, default_value_t = 0.02)]
    pub min_area: f64,
}

impl SegFlags {
    pub fn config(&self) -> SegConfig {
        SegConfig {
            threshold_mode: match self.seg_threshold {
                Threshold::Otsu => ThresholdMode::Otsu,
                Threshold::Fixed => ThresholdMode::Fixed(self.seg_fixed),
            },
            open_radius: self.open_radius,
            close_radius: self.close_radius,
            min_component_area: self.min_area,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GridFlags {
    /// Total patches: 16 (2×4 per lung) or 6 (1×3 per lung).
    #[arg(long, default_value_t = 16)]
    pub grid: u32,
    #[arg(long, default_value_t = GridSpec::DEFAULT_OVERLAP)]
    pub overlap: f64,
}

impl GridFlags {
    pub fn spec(&self) -> Result<GridSpec, String> {
        let spec = GridSpec::preset(self.grid, self.overlap)
            .ok_or_else(|| format!("--grid must be 16 or 6, got {}", self.grid))?;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Argmax,
    AllIntersecting,
}

impl From<Mode> for LabelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Argmax => LabelMode::Argmax,
            Mode::AllIntersecting => LabelMode::AllIntersecting,
        }
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Single image; without it every manifest case is segmented.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Mask output for `--in`.
    #[arg(long, requires = "input")]
    pub out: Option<PathBuf>,
    /// Reference mask for `--in`; prints the IoU.
    #[arg(long, requires = "input")]
    pub truth: Option<PathBuf>,
    /// Directory of `<case_id>.pgm` reference masks for manifest mode.
    #[arg(long, conflicts_with = "input")]
    pub truth_dir: Option<PathBuf>,
    #[command(flatten)]
    pub seg: SegFlags,
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Lung mask for `--in`; segmented when absent.
    #[arg(long, requires = "input")]
    pub mask: Option<PathBuf>,
    /// Resize-and-pad every patch to this square size instead of writing raw crops.
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub seg: SegFlags,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long, value_enum, default_value = "argmax")]
    pub mode: Mode,
    /// Take labels from the latest annotation per case instead of nodule boxes.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub seg: SegFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta_min: f64,
    /// Channels of the first convolution; the last block has twice as many.
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 56)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    /// Fixed `w_neg,w_pos`; inverse class frequency when absent.
    #[arg(long, value_parser = parse_pair)]
    pub class_weights: Option<(f64, f64)>,
    #[arg(long)]
    pub augment: bool,
    #[arg(long, value_enum, default_value = "argmax")]
    pub mode: Mode,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub seg: SegFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitSel {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Pre-scored items (line-delimited `{score, truth, case_id?, difficult?}`); skips inference.
    #[arg(long, conflicts_with = "checkpoint")]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitSel,
    /// Decision threshold; defaults to the checkpoint's, or 0.9.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub seg: SegFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub mask: Option<PathBuf>,
    /// Restrict manifest mode to these cases.
    #[arg(long = "case", conflicts_with = "input")]
    pub cases: Vec<String>,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub seg: SegFlags,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub mask: Option<PathBuf>,
    /// Manifest case to explain.
    #[arg(long = "case", conflicts_with = "input")]
    pub case: Option<String>,
    /// Single patch index; all patches when absent.
    #[arg(long)]
    pub patch: Option<usize>,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub seg: SegFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_rate: f64,
    #[arg(long, default_value_t = 6.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LUNGPATCH_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(
        long,
        env = "LUNGPATCH_ANNOTATION_LOG",
        default_value = "annotations.jsonl"
    )]
    pub annotation_log: PathBuf,
    #[arg(long, env = "LUNGPATCH_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "LUNGPATCH_SCORES")]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    pub seg: SegFlags,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected w_neg,w_pos, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}
