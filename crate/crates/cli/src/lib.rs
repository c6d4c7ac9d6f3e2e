//! The `segcurate` command line.
//!
//! Every subcommand writes JSON (keys sorted) to stdout or `--out`. Exit
//! codes: 0 success, 1 findings (invalid records, failed generations,
//! domain errors on well-formed input), 2 usage or input errors.

pub mod config;
pub mod server;

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "segcurate", version, about = "Curate, check and evaluate language-guided segmentation datasets")]
pub struct Cli {
    /// Write the result here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Human-readable table instead of JSON, where supported.
    #[arg(long, global = true)]
    pub table: bool,
    /// Worker threads for batch work (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file with default flag values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Point-prompt grids.
    #[command(subcommand)]
    Grid(GridCommand),
    /// Mask quality filtering against reference ranges.
    #[command(subcommand)]
    Filter(FilterCommand),
    /// Tight bounding boxes of RLE masks.
    Mask2bbox(Mask2BboxArgs),
    /// Training-loss evaluation.
    #[command(subcommand)]
    Loss(LossCommand),
    /// Assign targets to candidate masks.
    Match(MatchArgs),
    /// Matching cost over a range of query counts.
    Sweep(SweepArgs),
    /// gIoU/cIoU per evaluation bucket.
    Eval(EvalArgs),
    /// Dataset counts and histograms.
    Stats(StatsArgs),
    /// Schema, label and split checks for a dataset file.
    Validate(ValidateArgs),
    /// Generate question/answer pairs through a text-generation endpoint.
    QaGen(QaGenArgs),
    /// Human review service.
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Re-enqueue a seeded sample of accepted items for a second look.
    Audit(AuditArgs),
}

#[derive(Debug, Subcommand)]
pub enum GridCommand {
    /// The 4×4 grid of cell centers over a whole image.
    Global {
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
    },
    /// Grid shape for a box of size h×w; with --x0/--y0 also its points.
    Local {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long, requires = "y0")]
        x0: Option<f64>,
        #[arg(long, requires = "x0")]
        y0: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum FilterCommand {
    /// Reference ranges from gold masks of one category.
    DeriveStats {
        #[arg(long)]
        category: String,
        /// JSONL, one RLE mask per line.
        #[arg(long)]
        masks: PathBuf,
    },
    /// Count check and range filter over candidate masks.
    Run {
        /// JSONL of {"id", "mask", "bbox_count", "category"}.
        #[arg(long)]
        items: PathBuf,
        /// Reference stats: one object, an array, or JSONL.
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = segcurate_core::curation::DEFAULT_K_SIGMA)]
        k_sigma: f64,
        /// Per-category override, CATEGORY=K; repeatable.
        #[arg(long, value_name = "CATEGORY=K")]
        category_k_sigma: Vec<String>,
        #[arg(long, value_enum, default_value = "eight")]
        connectivity: ConnectivityArg,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ConnectivityArg {
    Four,
    Eight,
}

#[derive(Debug, Args)]
pub struct Mask2BboxArgs {
    /// JSON file with one RLE mask or an array of them.
    #[arg(long)]
    pub mask: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum LossCommand {
    /// Evaluate the combined loss for one sample.
    Eval {
        /// JSON with any of: attention, gt_grid | gt_mask, mask_logits,
        /// mask_target, text_logits, text_targets, ignore_id, weights.
        #[arg(long)]
        input: PathBuf,
        /// Include the spatial-loss gradient.
        #[arg(long)]
        gradient: bool,
    },
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Tensor [k, H, W] of candidate probabilities.
    #[arg(long)]
    pub candidates: PathBuf,
    /// JSON array of RLE target masks.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub w_bce: f64,
    #[arg(long, default_value_t = 5.0)]
    pub w_dice: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// JSON array of RLE target masks.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = segcurate_core::matching::DEFAULT_SWEEP_KS)]
    pub ks: Vec<usize>,
    /// Seed for the random candidate masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Include wall-clock timings (output is then not reproducible).
    #[arg(long)]
    pub timing: bool,
    /// CSV instead of JSON.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset JSONL with ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// JSONL of {"id", "masks": [RLE]} or {"id", "mask": RLE}.
    #[arg(long)]
    pub preds: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = segcurate_core::dataset::DEFAULT_LINGUISTIC_THRESHOLD)]
    pub threshold: usize,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the accepted records as canonical JSONL.
    #[arg(long, value_name = "PATH")]
    pub canonical: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QaGenArgs {
    /// JSONL of prompt requests.
    #[arg(long)]
    pub requests: PathBuf,
    #[arg(long, default_value = "http://127.0.0.1:8080/generate")]
    pub endpoint: String,
    #[arg(long, default_value = "")]
    pub model: String,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Use the built-in deterministic mock instead of the endpoint.
    #[arg(long)]
    pub mock: bool,
    /// Label the mock returns for category-assignment prompts.
    #[arg(long, default_value = "building")]
    pub mock_category: String,
    #[arg(long, value_enum, default_value = "reference")]
    pub image_transport: TransportArg,
    /// Environment variable holding a bearer token.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Leave the step-by-step reasoning clause out of the prompts.
    #[arg(long)]
    pub no_reasoning_trace: bool,
    /// Retry once on transport errors and 5xx answers.
    #[arg(long)]
    pub retry: bool,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
    /// Concurrent requests (default: --jobs, else 4).
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Directory with replacement prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Only render the prompts; no requests are sent.
    #[arg(long)]
    pub prompt_only: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TransportArg {
    None,
    Reference,
    Base64,
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Serve the review API, images and UI bundle.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Append-only decision log; replayed on start.
    #[arg(long)]
    pub log: PathBuf,
    /// JSONL of items to enqueue (ids already in the log are skipped).
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    pub lease_ttl_secs: u64,
    /// Write a state snapshot here periodically.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub snapshot_every_secs: u64,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Decision log of the review service.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Command tree where repeating a flag keeps the last value, so config
/// defaults can be overridden.
pub fn command() -> clap::Command {
    fn last_wins(cmd: clap::Command) -> clap::Command {
        let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
        let mut cmd = cmd.args_override_self(true);
        for n in names {
            cmd = cmd.mut_subcommand(n, last_wins);
        }
        cmd
    }
    last_wins(Cli::command())
}

/// Help of the deepest subcommand named in `argv`.
fn help_for(argv: &[OsString]) -> String {
    let mut cmd = command();
    cmd.build();
    let mut current = &cmd;
    for arg in argv.iter().skip(1) {
        if let Some(sub) = current.find_subcommand(arg.to_string_lossy().as_ref()) {
            current = sub;
        }
    }
    current.clone().render_help().to_string()
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cmd = command();
    let argv = match config::layer(&cmd, argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let matches = match cmd.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return 0;
                }
                _ => {
                    let _ = e.print();
                    eprintln!();
                    eprintln!("{}", help_for(&argv));
                    return 2;
                }
            }
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
