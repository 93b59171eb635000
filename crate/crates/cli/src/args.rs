//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cfasl", version, about = "Train, evaluate and inspect CFASL models")]
pub struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write `losses.csv` plus checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint with FVM or m-FVM and write `report.json`.
    Eval(EvalArgs),
    /// Export qualitative analyses of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Render the synthetic shapes dataset to a directory.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    BetaVae,
    BetaTcvae,
}

/// Run settings; every flag overrides the matching key of `--config`.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a `checkpoint-<step>` directory (its config is the base).
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub gumbel_temperature: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Sections, elements per section and latent size are set together as `S,E,D`.
    #[arg(long, value_parser = parse_codebook)]
    pub codebook: Option<(usize, usize, usize)>,
    /// Train on a directory written by `gen-data`.
    #[arg(long, conflicts_with = "dsprites")]
    pub dataset_dir: Option<PathBuf>,
    /// Train on the dSprites `.npz` archive.
    #[arg(long)]
    pub dsprites: Option<PathBuf>,
    /// Fraction of dSprites rows to keep.
    #[arg(long, requires = "dsprites")]
    pub subsample: Option<f64>,
    /// Loss switch such as `e=false` or `commutative=true`; repeatable.
    #[arg(long = "ablation", value_parser = parse_switch)]
    pub ablation: Vec<(String, bool)>,
    /// Start from every loss disabled before applying `--ablation`.
    #[arg(long)]
    pub all_off: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `fvm` or `m_fvm`.
    #[arg(long, default_value = "fvm")]
    pub metric: String,
    /// Number of fixed factors, required by `m_fvm`.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 800)]
    pub trials: usize,
    #[arg(long, default_value_t = 100)]
    pub samples_per_vote: usize,
    #[arg(long, default_value_t = 0.06)]
    pub prune_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to `report.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run trials on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for exports; defaults to `analysis/` beside the checkpoint.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub analysis: Analysis,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Three latent coordinates of encoded inputs, as CSV.
    Scatter {
        #[arg(long, default_value_t = cfasl::analysis::SCATTER_DEFAULT_N)]
        n: usize,
        /// Latent dimensions `a,b,c`; defaults to the three with the largest KL.
        #[arg(long, value_parser = parse_triple)]
        dims: Option<(usize, usize, usize)>,
        /// Fixed factor `index=value`; repeatable.
        #[arg(long = "fix", value_parser = parse_fix)]
        fix: Vec<(usize, u32)>,
        #[arg(long)]
        color_factor: Option<usize>,
    },
    /// Principal axes of the posterior means, as CSV.
    Eigen {
        #[arg(long, default_value_t = 256)]
        n: usize,
    },
    /// Copy latent dimensions of the target into the source one at a time.
    Swap {
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        num_dims: Option<usize>,
    },
    /// Apply the active sections of a composite symmetry one by one.
    Decompose {
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
    },
    /// Replay the symmetries between consecutive images of a sequence.
    Replay {
        /// Dataset rows in sequence order (at least two).
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        indices: Vec<usize>,
    },
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub positions_x: usize,
    #[arg(long, default_value_t = 8)]
    pub positions_y: usize,
    #[arg(long, default_value_t = 4)]
    pub scales: usize,
    #[arg(long, default_value_t = 1)]
    pub shapes: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_switch(s: &str) -> Result<(String, bool), String> {
    let (key, value) = s.split_once('=').ok_or_else(|| format!("expected KEY=BOOL, got `{s}`"))?;
    let on = value.parse::<bool>().map_err(|_| format!("`{value}` is not true or false"))?;
    Ok((key.trim().to_string(), on))
}

fn parse_fix(s: &str) -> Result<(usize, u32), String> {
    let (f, v) = s.split_once('=').ok_or_else(|| format!("expected FACTOR=VALUE, got `{s}`"))?;
    Ok((f.trim().parse().map_err(|e| format!("{e}"))?, v.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma separated integers, got `{s}`")),
    }
}

fn parse_codebook(s: &str) -> Result<(usize, usize, usize), String> {
    parse_triple(s)
}
