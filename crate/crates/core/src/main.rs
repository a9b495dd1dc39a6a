use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurovol::pipeline::{run_all, run_stage, PipelineConfig, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "neurovol", version, about = "Atlas-guided CT/MR brain segmentation and validation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom cohort and training atlas.
    PhantomGen(Common),
    /// Segment every subject with every configured method.
    Segment(Common),
    /// Overlap and surface distances of the CT methods against REF-MR.
    ValidateSeg(Common),
    /// Group means, CoV and warped-tissue overlap in atlas space.
    ValidateNorm(Common),
    /// TBV/TIV under the shared intracranial mask, with agreement statistics.
    Volumetrics(Common),
    /// Cross-validated sex classification from modulated tissue maps.
    Predict(Common),
    /// Consolidated text and CSV report.
    Report(Common),
    /// Every stage in order.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Seed, required unless the config sets one; must agree with it.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::PhantomGen(a) => (Some(Stage::PhantomGen), a),
        Command::Segment(a) => (Some(Stage::Segment), a),
        Command::ValidateSeg(a) => (Some(Stage::ValidateSeg), a),
        Command::ValidateNorm(a) => (Some(Stage::ValidateNorm), a),
        Command::Volumetrics(a) => (Some(Stage::Volumetrics), a),
        Command::Predict(a) => (Some(Stage::Predict), a),
        Command::Report(a) => (Some(Stage::Report), a),
        Command::All(a) => (None, a),
    };
    let result = PipelineConfig::load(&args.config, args.seed, args.out).and_then(|cfg| match stage {
        Some(s) => run_stage(s, &cfg, args.jobs),
        None => run_all(&cfg, args.jobs),
    });
    match result {
        Ok(StageOutcome { tasks, failures: 0 }) => {
            log::info!("{tasks} tasks completed");
            ExitCode::SUCCESS
        }
        Ok(StageOutcome { tasks, failures }) => {
            log::error!("{failures} of {tasks} tasks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
