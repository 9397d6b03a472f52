mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "idflow", version, about = "Identity-conditioned flow-matching toy lab")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed (falls back to the config file, then IDFLOW_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic identity/attribute dataset.
    GenData(GenDataArgs),
    /// Train the ID-injection weights on a dataset.
    Train(TrainArgs),
    /// Fuse checkpoints, searching coefficients on validation data unless weights are given.
    Fuse(FuseArgs),
    /// Sample identity-conditioned generations for dataset prompts.
    Sample(SampleArgs),
    /// Score generations against their dataset.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub ids: usize,
    #[arg(long, default_value_t = 128)]
    pub per_id: usize,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint.bin, losses.csv and config.toml.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Preset: A (identity consistency) or B (editability).
    #[arg(long)]
    pub variant: Option<String>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Seed for the fresh initialisation.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Checkpoints to fuse.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Explicit convex coefficients, one per checkpoint.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Dataset whose validation split scores the search.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[arg(long)]
    pub prompts_per_id: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Identities to sample (default: all).
    #[arg(long = "identity")]
    pub identities: Vec<usize>,
    /// Validation prompts per identity.
    #[arg(long, default_value_t = 4)]
    pub prompts_per_id: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub beta0: Option<f64>,
    /// Initial ID strength (default: the checkpoint's own).
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub guidance_cap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for metrics.csv and metrics.json.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Corrupt the analytic gradient of one parameter (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    let result = (|| {
        let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
        let seed = cfg.resolve_seed(cli.seed)?;
        match cli.command {
            Command::GenData(a) => commands::gen_data(a, cfg, seed),
            Command::Train(a) => commands::train(a, cfg, seed),
            Command::Fuse(a) => commands::fuse(a, cfg, seed),
            Command::Sample(a) => commands::sample(a, cfg, seed),
            Command::Eval(a) => commands::eval(a, cfg),
            Command::Gradcheck(a) => commands::gradcheck(a),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
