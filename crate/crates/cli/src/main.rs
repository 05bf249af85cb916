use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wmplanlab::evalreport::EvalMode;
use wmplanlab_cli::{load, run, CliError, Command, Options};

#[derive(Parser)]
#[command(name = "wmplanlab", version, about = "Train latent world models and evaluate planners through them")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Roll out the data-collection policy and write a dataset.
    GenData(Common),
    /// Train the baseline world model with teacher forcing.
    Train(Common),
    /// Finetune the baseline on simulator-corrected planner rollouts.
    FinetuneOnline(Common),
    /// Finetune the baseline on adversarially perturbed transitions.
    FinetuneAdv(Common),
    /// Train the planner initialization network.
    TrainInitnet(Common),
    /// Evaluate every (model, planner) cell on a shared task set.
    Eval(Common),
    /// Measure world-model error on expert versus planned actions.
    Gap(Common),
    /// Evaluate 2D loss-landscape slices for the baseline and adversarial models.
    Landscape(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OpenLoop,
    Mpc,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: wall-baseline, pointmass-baseline, wall-awm, wall-owm, longhorizon.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config value, e.g. `--set data.n_traj=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace an existing dataset directory.
    #[arg(long)]
    force: bool,
    /// Evaluation worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated planner names to evaluate.
    #[arg(long, value_delimiter = ',')]
    planners: Option<Vec<String>>,
    /// Comma-separated checkpoint names to evaluate.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var("WMPLANLAB_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("WMPLANLAB_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    let (cmd, c) = match cli.command {
        Sub::GenData(c) => (Command::GenData, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::FinetuneOnline(c) => (Command::FinetuneOnline, c),
        Sub::FinetuneAdv(c) => (Command::FinetuneAdv, c),
        Sub::TrainInitnet(c) => (Command::TrainInitnet, c),
        Sub::Eval(c) => (Command::Eval, c),
        Sub::Gap(c) => (Command::Gap, c),
        Sub::Landscape(c) => (Command::Landscape, c),
    };
    let cfg = load(c.config.as_deref(), c.preset.as_deref(), &c.overrides, seed_from_env()?)?;
    let opts = Options {
        force: c.force,
        workers: c.workers,
        planners: c.planners,
        models: c.models,
        mode: c.mode.map(|m| match m {
            ModeArg::OpenLoop => EvalMode::OpenLoop,
            ModeArg::Mpc => EvalMode::Mpc,
        }),
    };
    let out = run(cmd, &cfg, &opts)?;
    println!("{}", out.output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
