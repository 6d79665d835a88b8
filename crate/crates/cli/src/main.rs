mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use iced_core::designers::Method;
use iced_core::driver::SmiSign;

use crate::config::Preset;

#[derive(Parser)]
#[command(name = "iced", version, about = "Curriculum training on procedurally generated gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML file with [dataset], [vae] and [train] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default values the config file and flags build on.
    #[arg(long, value_enum, default_value_t = Preset::Desk, global = true)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training, test, edge-case and large-area level sets.
    GenDataset {
        #[command(flatten)]
        common: Common,
        /// Number of training levels.
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Fit the level VAE on a training set.
    PretrainVae {
        #[command(flatten)]
        common: Common,
        /// Level file (JSON array).
        #[arg(long)]
        levels: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train an agent.
    Train(TrainArgs),
    /// Evaluate a trained run on level sets.
    Evaluate {
        /// Run directory holding config.json and agent.ckpt.
        #[arg(long)]
        run_dir: PathBuf,
        /// name=path or path entries.
        #[arg(long, value_delimiter = ',', required = true)]
        eval_sets: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Merge run reports into one comparison CSV.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub method: Option<Method>,
    /// Training level file.
    #[arg(long)]
    pub levels: PathBuf,
    /// Pretrained VAE (needed by --method iced).
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub updates: Option<usize>,
    /// Parallel rollout workers per update.
    #[arg(long)]
    pub workers: Option<usize>,
    /// name=path or path entries; the set named `test` drives test_return.
    #[arg(long, value_delimiter = ',')]
    pub eval_sets: Vec<String>,
    #[arg(long)]
    pub dump_buffer_every: Option<usize>,
    /// Sign of the MI score (+ or -).
    #[arg(long, allow_hyphen_values = true)]
    pub smi_sign: Option<SmiSign>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenDataset { common, levels } => commands::gen_dataset(&common, levels),
        Command::PretrainVae { common, levels, epochs } => commands::pretrain_vae(&common, &levels, epochs),
        Command::Train(args) => commands::train(&args),
        Command::Evaluate {
            run_dir,
            eval_sets,
            episodes,
            seed,
            greedy,
        } => commands::evaluate(&run_dir, &eval_sets, episodes, seed, greedy),
        Command::Report { runs, out } => commands::report(&runs, out.as_deref()),
    }
}
