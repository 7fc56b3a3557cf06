use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use tencdm::pipeline::{run_stage, Overrides, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenCorpus,
    PretrainEncoder,
    FitNormalizer,
    TrainDecoder,
    TrainDiffusion,
    Sample,
    Eval,
    Analyze,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::GenCorpus => Stage::GenCorpus,
            Command::PretrainEncoder => Stage::PretrainEncoder,
            Command::FitNormalizer => Stage::FitNormalizer,
            Command::TrainDecoder => Stage::TrainDecoder,
            Command::TrainDiffusion => Stage::TrainDiffusion,
            Command::Sample => Stage::Sample,
            Command::Eval => Stage::Eval,
            Command::Analyze => Stage::Analyze,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Latent text diffusion pipeline. Stages share one output directory.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (TOML). Defaults to OUT/config.toml if present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps of this stage, or sampling steps for sample/eval/analyze.
    #[arg(long)]
    steps: Option<usize>,
    /// cosine, sqrt or tan-<d>
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, value_enum)]
    self_cond: Option<Switch>,
    /// Candidates per output for MBR selection (0 disables it).
    #[arg(long)]
    mbr: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        steps: cli.steps,
        schedule: cli.schedule,
        self_cond: cli.self_cond.map(|s| matches!(s, Switch::On)),
        mbr: cli.mbr,
    };
    match run_stage(cli.command.into(), &cli.out, cli.config.as_deref(), &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
