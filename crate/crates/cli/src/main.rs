//! `specgen`: synthetic spectrogram generation, diffusion training and
//! sampling, evaluation, transfer studies and the built-in oracle suite.

mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A problem with how the command was invoked rather than with the run.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "specgen", version, about = "Synthetic RF spectrogram diffusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file with `[section]` headers; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Thread cap; 1 guarantees bit-identical results.
    #[arg(long, global = true, env = "SPECGEN_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a labelled spectrogram dataset.
    Synth(commands::SynthArgs),
    /// Train the diffusion model on a dataset directory.
    Train(commands::TrainArgs),
    /// Draw spectrograms from a checkpoint.
    Sample(commands::SampleArgs),
    /// Score generated images against their nearest references.
    Eval(commands::EvalArgs),
    /// Pretrained-versus-scratch convergence study.
    Transfer(commands::TransferArgs),
    /// Run the built-in oracle checks.
    Verify(commands::VerifyArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
