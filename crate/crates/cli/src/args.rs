use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

const AFTER_HELP: &str = "\
Configuration is a JSON document with the sections data, augment, backbone,
protoclr, finetune, eval and supervised. Missing keys take their defaults;
unknown keys are rejected. `prototransfer defaults` prints every default.
Flags override the config file, which overrides the defaults.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Failures print one `error[kind]: reason` line on standard error.";

#[derive(Debug, Parser)]
#[command(name = "prototransfer", version, about = "Self-supervised prototypical pre-training and few-shot evaluation")]
#[command(after_help = AFTER_HELP)]
pub struct Cli {
    /// Worker threads for augmentation and evaluation (results do not depend on it).
    #[arg(long, global = true, env = "PROTO_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train an embedding network and write its checkpoint and training log.
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint to a labeled split and report held-out accuracy.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on few-shot episodes.
    Eval(EvalArgs),
    /// Pre-train and evaluate one network per batch size / query count / fine-tune setting.
    Ablate(AblateArgs),
    /// Check backpropagated gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Convert an image directory tree to the PGM/PPM or PTT1 layout.
    Convert(ConvertArgs),
    /// Print (or write) the default configuration.
    Defaults(DefaultsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Replaces every training and evaluation seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Self-supervised prototypical pre-training (labels unused).
    Protoclr,
    /// Supervised episodic prototypical training.
    Protonet,
    /// Supervised softmax classifier; only the backbone is kept.
    PreLinear,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,

    /// Checkpoint path; receives the state with the best smoothed accuracy.
    #[arg(long, short, default_value = "checkpoint.ptt1")]
    pub out: PathBuf,

    /// Training log CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Method::Protoclr)]
    pub method: Method,

    /// Cap on training iterations (protoclr and protonet) or epochs (pre-linear).
    #[arg(long)]
    pub max_iters: Option<u64>,

    /// Print progress every this many iterations (0 silences it).
    #[arg(long, default_value_t = 100)]
    pub progress_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Head,
    Full,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,

    /// Network checkpoint; not needed by the oracle and random adaptors.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,

    #[arg(long)]
    pub ways: Option<usize>,

    /// Comma-separated shot counts, one report row each.
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,

    #[arg(long)]
    pub episodes: Option<usize>,

    #[arg(long)]
    pub queries: Option<usize>,

    /// oracle, random, proto, prototune or linear.
    #[arg(long)]
    pub adaptor: Option<String>,

    /// Fine-tuning epochs for the prototune and linear adaptors.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Summary CSV; per-episode CSVs and a markdown table are written beside it.
    #[arg(long, short, default_value = "report.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,

    /// Labeled images per class used for adaptation; the rest are scored.
    #[arg(long, default_value_t = 5)]
    pub shots: usize,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,

    /// Adapted network plus classifier head.
    #[arg(long, short, default_value = "adapted.ptt1")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FinetuneGrid {
    Off,
    On,
    Both,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long, value_delimiter = ',', default_value = "50,5")]
    pub batch_sizes: Vec<usize>,

    #[arg(long, value_delimiter = ',', default_value = "3,1")]
    pub queries: Vec<usize>,

    #[arg(long, value_enum, default_value_t = FinetuneGrid::Both)]
    pub finetune: FinetuneGrid,

    #[arg(long)]
    pub ways: Option<usize>,

    /// Shot count of the evaluation episodes (default: the largest configured).
    #[arg(long)]
    pub shots: Option<usize>,

    #[arg(long)]
    pub episodes: Option<usize>,

    #[arg(long)]
    pub max_iters: Option<u64>,

    #[arg(long, short, default_value = "ablation.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,

    /// Coordinates compared per parameter tensor.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,

    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,

    /// Corrupt the first kernel's gradient by this factor (self-test).
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    /// PGM for grayscale, PPM for color.
    Pgm,
    Ptt1,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Directory of class subdirectories holding PNG, JPEG or PNM images.
    pub input: PathBuf,
    pub output: PathBuf,

    #[arg(long, value_enum, default_value_t = FormatArg::Pgm)]
    pub format: FormatArg,

    /// Resize to this square side.
    #[arg(long)]
    pub size: Option<usize>,

    /// Force 1 (luma) or 3 channels.
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DefaultsArgs {
    /// Write here instead of standard output.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
