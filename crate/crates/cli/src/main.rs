//! `fguap` — reproducible experiments around feature-gathering universal
//! perturbations: dataset generation, training, crafting, and evaluation.
//!
//! Exit codes: 0 on success, 2 for usage errors, 1 for runtime failures.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Runtime(String),
}

impl From<fguap::Error> for AppError {
    fn from(e: fguap::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;

#[derive(Parser)]
#[command(
    name = "fguap",
    version,
    about = "Universal adversarial perturbations via feature gathering, at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset files
    GenData(commands::GenDataArgs),
    /// Train a victim classifier and write a checkpoint plus history CSV
    Train(commands::TrainArgs),
    /// Craft a universal perturbation against a trained checkpoint
    Attack(commands::AttackArgs),
    /// Evaluate a perturbation: fooling ratios, dominance, collapse metrics
    Eval(commands::EvalArgs),
    /// Cross-model transfer matrix over checkpoint/perturbation directories
    Transfer(commands::TransferArgs),
    /// Fooling ratio as the per-class training subset shrinks
    Redundancy(commands::RedundancyArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage errors and 0 for --help/--version
            e.exit();
        }
    };
    let result = match cli.cmd {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Attack(args) => commands::attack(args),
        Command::Eval(args) => commands::eval(args),
        Command::Transfer(args) => commands::transfer(args),
        Command::Redundancy(args) => commands::redundancy(args),
    };
    match result {
        Ok(()) => {}
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
