use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tokenhier", version, about = "Token-hierarchy ViT pipeline: tiling, stain augmentation, SSL pretraining, probing and benchmarking")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Master seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on this value.
    #[arg(long, global = true, env = "TOKENHIER_THREADS")]
    pub threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LogLevel,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Linear,
    Attnpool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceArg {
    Lab,
    Hsv,
    Both,
    Either,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindArg {
    Global,
    Local,
    Shifted,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cut tissue tiles from every raster in a directory into a JSON-lines manifest.
    Tile(TileArgs),
    /// Write stain-augmented views of rasters.
    Augment(AugmentArgs),
    /// Self-supervised pretraining (DINO + iBOT + Koleo).
    Pretrain(TrainArgs),
    /// Gram-anchored post-training.
    Posttrain(PosttrainArgs),
    /// Frozen-encoder token features for a class-directory dataset.
    Embed(EmbedArgs),
    /// Train and score one head on frozen features.
    Probe(ProbeArgs),
    /// Score one encoder on several tasks, head modes and seeds.
    Bench(BenchArgs),
    /// Three-row ablation grid: stain augmentation × head mode.
    Ablate(AblateArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic suite as a class-directory dataset.
    Synth(SynthArgs),
    /// Run the whole pipeline end to end on synthetic data.
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
pub struct TileArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub min_tissue: Option<f64>,
    /// Treat bright pixels as tissue (non-H&E inputs).
    #[arg(long)]
    pub invert: bool,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// A raster file or a directory of rasters.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON stain augmentation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    #[arg(long)]
    pub space: Option<SpaceArg>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config with `encoder`, `ssl`, `corpus_size` and `corpus_dir`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Output checkpoint; the loss log goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    /// Directory of rasters to train on instead of the synthetic corpus.
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    #[arg(long)]
    pub no_stain_aug: bool,
}

#[derive(Args, Debug)]
pub struct PosttrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Encoder whose patch-token Gram matrix anchors the student.
    #[arg(long)]
    pub gram_teacher: Option<PathBuf>,
    /// SSL checkpoint to resume; defaults to the Gram teacher when it is one.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the patch tokens.
    #[arg(long)]
    pub patches: bool,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub report: PathBuf,
    /// JSON head training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON bench config (seeds, tasks, modes, head).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// JSON ablation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; the SVG chart is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Corrupt one component's analytic gradient (verification of the check itself).
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Optional JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON suite spec; `kind` on the command line wins.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Pretraining steps; post-training runs a third of this.
    #[arg(long, default_value_t = 60)]
    pub steps: usize,
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
}
