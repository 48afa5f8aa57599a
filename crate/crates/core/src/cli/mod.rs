//! The `gamkit` command line: `explain`, `evaluate` and `sanity`.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 partial failure
//! (some items failed, or a score was not finite).

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{GamError, Result};

pub use commands::{cmd_evaluate, cmd_explain, cmd_sanity, Outcome};
pub use config::{
    builtin_weights, cache_dir, load_model, load_weights_file, save_weights_file, LoadedModel, ModelConfig, RunConfig, SanityConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gamkit", version, about = "Gradient Activation Maps, Grad-CAM and Grad-CAM++ saliency")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Saliency map for one image, or for an image pair under a similarity score.
    Explain(ExplainArgs),
    /// ADP, PIC and IoU over a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Parameter- or data-randomisation sanity test.
    Sanity(SanityArgs),
}

#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    /// Backbone: toy, lenet, densenet-mini.
    #[arg(long, visible_alias = "arch")]
    pub model: Option<String>,
    /// `random`, `builtin` or a JSON weights file.
    #[arg(long)]
    pub weights: Option<String>,
    /// `pooled`, `penultimate` or `hidden:<k>`.
    #[arg(long)]
    pub embedding_point: Option<String>,
    /// Comma-separated eligible block names.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<String>>,
}

#[derive(Debug, Default, Args)]
pub struct RenderArgs {
    /// Overlay opacity in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub colormap: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input image.
    pub image: Option<PathBuf>,
    /// gam, gc or gcpp.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// logit, dot or cosine.
    #[arg(long)]
    pub score: Option<String>,
    /// Class label or index (default: the predicted class).
    #[arg(long)]
    pub class: Option<String>,
    /// Second image of a similarity pair.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub render: RenderArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Comma-separated layer counts; later ones are compared with the first.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub score: Option<String>,
    /// Fixed binarization threshold.
    #[arg(long, conflicts_with = "auto_threshold")]
    pub threshold: Option<f64>,
    /// Choose thresholds on a holdout split of this fraction (default 0.2).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.2")]
    pub auto_threshold: Option<f64>,
    /// Same-label pairs drawn per class when the manifest has no pairs.
    #[arg(long)]
    pub pairs_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SanityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// param or data.
    #[arg(long)]
    pub test: Option<String>,
    /// Manifest file, MNIST IDX directory, or `synthetic`.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Images whose maps are compared.
    #[arg(long)]
    pub images: Option<usize>,
    /// Training images.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// random or identity (data test).
    #[arg(long)]
    pub permutation: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[command(flatten)]
    pub render: RenderArgs,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let file = match &cli.config {
        Some(p) => {
            config::require_file(p, "config file")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let workers = cli.workers.or(file.workers);
    let pool = match workers {
        Some(0) => return Err(GamError::Config("--workers must be at least 1".into())),
        Some(w) => rayon::ThreadPoolBuilder::new().num_threads(w).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| GamError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Explain(a) => cmd_explain(&cli, a, &file),
        Command::Evaluate(a) => cmd_evaluate(&cli, a, &file),
        Command::Sanity(a) => cmd_sanity(&cli, a, &file),
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(outcome) => {
            for line in &outcome.summary {
                eprintln!("{line}");
            }
            if outcome.partial_failures > 0 {
                eprintln!("{} item(s) failed", outcome.partial_failures);
                EXIT_PARTIAL
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}
