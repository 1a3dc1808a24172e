//! `dwt`: data generation, target computation, training, inference and
//! evaluation for the watershed-energy instance segmentation pipeline.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Result;
use crate::run::Run;

#[derive(Parser)]
#[command(name = "dwt", version, about = "Watershed-energy instance segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for per-image work. Results at 1 thread are bit-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val scenes.
    GenData(Common),
    /// Compute distance, direction, energy and weight targets.
    MakeTargets(Common),
    /// Classical watershed on the image gradient versus the energy cut.
    WatershedDemo(Common),
    /// Pretrain the direction network.
    TrainDn(Common),
    /// Pretrain the watershed transform network on ground-truth directions.
    TrainWtn(Common),
    /// Train both networks end to end.
    Finetune(Common),
    /// Predict energy maps and extract instances.
    Infer(Common),
    /// Score inferred instances: AP, AP50, muCov, bin accuracy, angular error.
    Eval(Common),
    /// Mean AP under random, confidence and oracle instance orderings.
    OrderingStudy(Common),
    /// Finite-difference gradient checks of every layer, loss and network.
    GradCheck(Common),
}

type Handler = fn(&mut Run) -> Result<()>;

fn dispatch(command: Command) -> Result<()> {
    let (name, common, handler, substreams): (&'static str, Common, Handler, &[&str]) = match command {
        Command::GenData(c) => ("gen-data", c, commands::gen_data, &["data"]),
        Command::MakeTargets(c) => ("make-targets", c, commands::make_targets, &[]),
        Command::WatershedDemo(c) => ("watershed-demo", c, commands::watershed_demo, &[]),
        Command::TrainDn(c) => ("train-dn", c, commands::train_dn, &["init.dn", "shuffle.dn"]),
        Command::TrainWtn(c) => ("train-wtn", c, commands::train_wtn, &["init.wtn", "shuffle.wtn"]),
        Command::Finetune(c) => ("finetune", c, commands::finetune_cmd, &["shuffle.finetune"]),
        Command::Infer(c) => ("infer", c, commands::infer, &[]),
        Command::Eval(c) => ("eval", c, commands::eval, &[]),
        Command::OrderingStudy(c) => ("ordering-study", c, commands::ordering, &["ordering.0"]),
        Command::GradCheck(c) => ("grad-check", c, commands::grad_check, &["grad_check.0"]),
    };
    let config = RunConfig::load(&common.config)?;
    if common.threads == 0 {
        return Err(error::CliError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| error::CliError::Config(format!("thread pool: {e}")))?;
    let out = common.out.clone().unwrap_or_else(|| config.out.clone());
    log::info!("{name}: config {} -> {}", common.config.display(), out.display());
    let mut run = Run::start(name, &config, out, common.threads)?;
    handler(&mut run)?;
    run.finish(substreams)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
